"""Command-line front door binding the pipeline stages into reproducible runs.

Subcommands: optimize, distill, batch, revise, eval. Every run writes its
artifacts atomically (temp file + rename) plus a manifest carrying the config
digest, seeds, and gateway call counts, which is enough to reproduce the run
bit-exactly under the mock backend.
"""

from __future__ import annotations

import argparse
import importlib.util
import json
import logging
import os
import sys
from pathlib import Path
from random import Random
from typing import Optional

from . import batching, distill, revision
from .classify import RuleClassifier
from .config import RunConfig, load_config
from .errors import (
    BackendError,
    ConfigError,
    ProtocolError,
    RulebookError,
)
from .gateway import Gateway, HttpBackend
from .labels import LabelSpace, load_dataset
from .metrics import balanced_accuracy, macro_f1
from .mock import MockBackend, MockScript
from .optimizer import SpoOptimizer, load_snapshot
from .rules import FiringTable, load_sop, save_sop, sop_prompt_text

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_BACKEND = 4
EXIT_DATA = 5


def _load_mock_script(path: str) -> MockScript:
    spec = importlib.util.spec_from_file_location("rulebook_mock_script", path)
    if spec is None or spec.loader is None:
        raise ConfigError(f"cannot load mock script {path!r}")
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    if not hasattr(module, "build_script"):
        raise ConfigError(f"mock script {path!r} must define build_script() -> MockScript")
    script = module.build_script()
    if not isinstance(script, MockScript):
        raise ConfigError(f"mock script {path!r} did not return a MockScript")
    return script


def _gateway(config: RunConfig, mock_path: Optional[str]) -> Gateway:
    if mock_path:
        backend = MockBackend(_load_mock_script(mock_path))
    else:
        if not config.gateway.endpoint:
            raise ConfigError("gateway.endpoint: required unless --mock is given")
        backend = HttpBackend(config.gateway.endpoint, config.gateway.api_key_env)
    return Gateway(
        backend,
        cache_dir=config.gateway.cache_dir,
        retries=config.gateway.retries,
        backoff=config.gateway.backoff,
    )


def _atomic_write_json(payload: dict, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, ensure_ascii=False), encoding="utf-8")
    os.replace(tmp, path)


def _write_manifest(command: str, config: RunConfig, gateway: Gateway, artifacts: list[str], path: Path) -> None:
    payload = {
        "command": command,
        "config_digest": config.digest(),
        "seed": config.seed,
        "gateway": gateway.stats.snapshot(),
        "artifacts": artifacts,
    }
    _atomic_write_json(payload, path)


def _dataset(config: RunConfig, flag_value: Optional[str], name: str):
    path = flag_value or config.datasets.get(name)
    if not path:
        raise ConfigError(f"datasets.{name}: not configured and no flag given")
    return load_dataset(path, config.space)


# -- subcommands --------------------------------------------------------------


def cmd_optimize(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    gateway = _gateway(config, args.mock)
    train = _dataset(config, args.train, "train")
    val = _dataset(config, args.val, "val")
    optimizer = SpoOptimizer(config.optimizer, gateway, config.space, config.task)
    resume_state = load_snapshot(args.resume) if args.resume else None
    snapshot_path = args.snapshot or (args.out + ".snapshot.json")
    result = optimizer.run(
        train, val, seed=config.seed, snapshot_path=snapshot_path, resume_state=resume_state
    )
    save_sop(result.rules, args.out)
    log_path = Path(args.out + ".log.jsonl")
    tmp = log_path.with_name(log_path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for report in result.reports:
            fh.write(json.dumps({
                "iteration": report.iteration,
                "objective": report.objective,
                "new_rules": report.new_rule_ids,
                "false_coverage": report.false_coverage,
                "blind_spots": report.blind_spots,
                "batch_classifier_calls": report.batch_classifier_calls,
                "val_classifier_calls": report.val_classifier_calls,
            }, ensure_ascii=False) + "\n")
    os.replace(tmp, log_path)
    _write_manifest("optimize", config, gateway, [args.out, str(log_path), snapshot_path],
                    Path(args.out + ".manifest.json"))
    for t, score in result.trajectory:
        print(f"iteration {t}: objective {score:.4f}")
    print(f"selected {len(result.rules)} rules -> {args.out}")
    return EXIT_OK


def cmd_distill(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    gateway = _gateway(config, args.mock)
    train = _dataset(config, args.train, "train")
    rules = load_sop(args.sop, config.space)
    sop_text = sop_prompt_text(rules)
    sampler = distill.TeacherSampler(config.distill, gateway, config.space, config.task)
    results = [sampler.sample(ex, sop_text) for ex in train]
    dset = distill.build_distillation_set(results)
    # the same M-attempt protocol on val marks the hard slice the revision
    # stage selects on; val traces never enter the distillation epoch
    val_results = []
    if config.datasets.get("val"):
        val = _dataset(config, None, "val")
        val_results = [sampler.sample(ex, sop_text) for ex in val]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    examples_by_id = {ex.id: ex for ex in train}
    epoch = distill.balance_upsample(dset, examples_by_id, config.space, Random(config.seed))
    rsft_path = out_dir / "rsft.jsonl"
    manifest_path = out_dir / "difficulty.jsonl"
    audit_path = out_dir / "audit.jsonl"
    distill.export_rsft(epoch, examples_by_id, config.space, config.task, rsft_path)
    distill.write_manifest(results + val_results, manifest_path)
    distill.write_audit(results + val_results, audit_path)
    _write_manifest("distill", config, gateway,
                    [str(rsft_path), str(manifest_path), str(audit_path)],
                    out_dir / "manifest.json")
    print(f"accepted {len(dset.accepted)} traces; hard {len(dset.hard_ids)} / easy {len(dset.easy_ids)}")
    print(f"epoch of {len(epoch)} records -> {rsft_path}")
    return EXIT_OK


def _provider(config: RunConfig, gateway: Optional[Gateway]):
    if config.batcher.provider == "synthetic":
        return batching.SyntheticRolloutProvider(
            config.space,
            lambda ex: batching.difficulty_probability(config.batcher, ex),
            seed=config.seed,
        )
    if gateway is None:
        raise ConfigError("batcher.provider=gateway requires an endpoint or --mock")
    return batching.GatewayRolloutProvider(
        gateway, config.space, config.task,
        model=config.batcher.rollout_model, temperature=config.batcher.temperature,
    )


def cmd_batch(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    needs_gateway = config.batcher.provider == "gateway" or config.batcher.lambda_aux > 0
    gateway = _gateway(config, args.mock) if (needs_gateway or args.mock) else Gateway(MockBackend(MockScript()))
    pool = load_dataset(args.pool, config.space)
    if args.difficulty:
        manifest = distill.load_manifest(args.difficulty)
        pool = [
            ex.with_difficulty(manifest[ex.id]["difficulty"]) if ex.id in manifest else ex
            for ex in pool
        ]
    class_pools = {lab: [ex for ex in pool if ex.gold == lab] for lab in config.space.labels}
    provider = _provider(config, gateway)
    aux_scorer = None
    if config.batcher.lambda_aux > 0:
        aux_scorer = batching.JudgeAuxScorer(config.batcher, gateway, config.space, config.task)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = Random(config.seed)
    examples_by_id = {ex.id: ex for ex in pool}
    artifacts = []
    for step in range(args.steps):
        batch = batching.build_batch(
            class_pools,
            provider,
            B=config.batcher.B,
            G=config.batcher.G,
            kappa=config.batcher.kappa,
            step=step,
            rng=rng,
            space=config.space,
            epsilon=config.batcher.epsilon,
            lambda_aux=config.batcher.lambda_aux,
            aux_scorer=aux_scorer,
        )
        path = out_dir / f"batch-{step:05d}.jsonl"
        batching.export_batch(batch, examples_by_id, config.space, config.task, path)
        artifacts.append(str(path))
        print(
            f"step {step}: {len(batch.groups)} groups "
            f"(filtered {batch.filtered_count}, topped up {batch.topped_up_count})"
        )
    _write_manifest("batch", config, gateway, artifacts, out_dir / "manifest.json")
    return EXIT_OK


def cmd_revise(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    gateway = _gateway(config, args.mock)
    existing = load_sop(args.sop, config.space)
    manifest = distill.load_manifest(args.hard)
    hard_ids = {ex_id for ex_id, rec in manifest.items() if rec["difficulty"] == "hard"}
    records = []
    for path in args.rollouts:
        records.extend(batching.load_batch(path))
    audit_path = args.audit or (str(Path(args.hard).with_name("audit.jsonl")))
    audit = distill.load_audit(audit_path)
    teacher_failures = {}
    for example_id, attempts in audit.items():
        failed = [a for a in attempts if not a.get("accepted")]
        if failed:
            teacher_failures[example_id] = failed[0].get("reasoning") or ""
    pairs = revision.collect_hard_successes(records, hard_ids, teacher_failures, config.space)
    val = _dataset(config, args.val, "val")
    val_hard = [ex for ex in val if ex.id in hard_ids]
    pipeline = revision.RevisionPipeline(config.revise, gateway, config.space, config.task)
    classifier = RuleClassifier(
        gateway, config.space, config.task,
        model=config.optimizer.classifier_model,
        temperature=config.optimizer.classifier_temperature,
        in_flight=config.gateway.in_flight,
    )
    result = revision.run_revision(pipeline, pairs, existing, val_hard, classifier, FiringTable())
    save_sop(list(existing) + result.additions, args.out)
    _write_manifest("revise", config, gateway, [args.out], Path(args.out + ".manifest.json"))
    print(
        f"mined {len(result.candidates)} candidates, selected {len(result.additions)}; "
        f"val_hard objective {result.base_score:.4f} -> {result.score:.4f}"
    )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    gold_examples = load_dataset(args.gold)
    if args.config:
        space = load_config(args.config).space
    else:
        space = LabelSpace(labels=tuple(sorted({ex.gold for ex in gold_examples})))
    golds_by_id = {ex.id: ex.gold for ex in gold_examples}
    pred_examples = load_dataset(args.preds)
    preds, golds = [], []
    for ex in pred_examples:
        if ex.id not in golds_by_id:
            raise RulebookError(f"prediction for unknown example id {ex.id!r}")
        preds.append(ex.gold)
        golds.append(golds_by_id[ex.id])
    if len(preds) != len(golds_by_id):
        missing = sorted(set(golds_by_id) - {ex.id for ex in pred_examples})
        raise RulebookError(f"predictions missing for {len(missing)} example(s), e.g. {missing[:3]}")
    print(f"macro-F1 {macro_f1(preds, golds, space):.4f}")
    print(f"balanced-accuracy {balanced_accuracy(preds, golds, space):.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rulebook", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="learn a rulebook from train/val data")
    p.add_argument("--config", required=True)
    p.add_argument("--train")
    p.add_argument("--val")
    p.add_argument("--out", required=True, help="output rulebook (SOP) file")
    p.add_argument("--resume", help="resume from a state snapshot")
    p.add_argument("--snapshot", help="snapshot path (default: <out>.snapshot.json)")
    p.add_argument("--mock", help="python file defining build_script() for the mock backend")
    p.set_defaults(fn=cmd_optimize)

    p = sub.add_parser("distill", help="collect teacher traces and export the R-SFT file")
    p.add_argument("--config", required=True)
    p.add_argument("--sop", required=True)
    p.add_argument("--train")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mock")
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("batch", help="build and export RL training batches")
    p.add_argument("--config", required=True)
    p.add_argument("--pool", required=True, help="dataset file with the training pool")
    p.add_argument("--difficulty", help="hard/easy manifest to tag the pool")
    p.add_argument("--steps", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mock")
    p.set_defaults(fn=cmd_batch)

    p = sub.add_parser("revise", help="mine rulebook additions from RL rollouts on hard inputs")
    p.add_argument("--config", required=True)
    p.add_argument("--sop", required=True)
    p.add_argument("--rollouts", nargs="+", required=True, help="batch export file(s)")
    p.add_argument("--hard", required=True, help="hard/easy manifest")
    p.add_argument("--audit", help="teacher attempt audit log (default: audit.jsonl next to --hard)")
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    p.add_argument("--mock")
    p.set_defaults(fn=cmd_revise)

    p = sub.add_parser("eval", help="score a prediction file against gold labels")
    p.add_argument("--preds", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_eval)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BackendError, ProtocolError) as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except RulebookError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
