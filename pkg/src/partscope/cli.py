"""Command-line entry point wiring every stage of the pipeline.

Subcommands: gen-data, annotate, sft, self-train, grpo, eval, perturb-eval,
score, elo.  Exit codes: 0 success, 1 validation/usage error, 2 runtime
failure.  Every run writes its resolved configuration next to its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import jsonschema

from .annotation import (
    MockPerceptionClient,
    annotate_sample,
    load_annotations,
    load_review_rejections,
    save_annotations,
)
from .config import RunConfig, resolve_config, write_resolved
from .evalbench.elo import EloTable
from .evalbench.evaluate import evaluate_levels, robustness_report
from .evalbench.synthdata import derived_seed, gen_dataset, load_dataset, save_dataset
from .pipeline import ForensicModel, load_model, predictor, save_model
from .reasoner import InjectionMode
from .rewards import JudgeError, MockJudge, RecordedJudge, compute_reward
from .training import (
    GrpoConfig,
    TrainingDivergedError,
    apply_candidate_review,
    rejection_sample,
    rl_pool,
    run_grpo,
    run_sft,
    sft_pool,
)
from .transcript import get_vocab

_VALIDATION_ERRORS = (
    ValueError,
    KeyError,
    FileNotFoundError,
    NotADirectoryError,
    IsADirectoryError,
    json.JSONDecodeError,
    jsonschema.exceptions.ValidationError,
)
_RUNTIME_ERRORS = (TrainingDivergedError, JudgeError, ArithmeticError, OSError)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports bad flags as exit code 1, not 2."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--seed", type=int, help="master seed")


def _add_ablation_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--no-stage-gate", action="store_true",
                   help="inject evidence at part tokens in every stage")
    p.add_argument("--zero-evidence", action="store_true",
                   help="inject zeros instead of encoder evidence")
    p.add_argument("--no-spectral", action="store_true",
                   help="disable the frequency-domain encoder branch")
    p.add_argument("--no-pixel", action="store_true",
                   help="disable the pixel-domain encoder branch")


def _resolve(args: argparse.Namespace, **extra) -> RunConfig:
    overrides = dict(extra)
    if getattr(args, "seed", None) is not None:
        overrides["master_seed"] = args.seed
    if getattr(args, "no_stage_gate", False):
        overrides["stage_gated"] = False
    if getattr(args, "zero_evidence", False):
        overrides["zero_evidence"] = True
    if getattr(args, "no_spectral", False):
        overrides["stack.use_spectral"] = False
    if getattr(args, "no_pixel", False):
        overrides["stack.use_pixel"] = False
    return resolve_config(getattr(args, "config", None), **overrides)


def _mode(cfg: RunConfig) -> InjectionMode:
    return InjectionMode(stage_gated=cfg.stage_gated, zero_evidence=cfg.zero_evidence)


def _make_judge(name: str, recording: str | None):
    if name == "mock":
        return MockJudge()
    if name == "recorded":
        if not recording:
            raise ValueError("--judge recorded requires --judge-recording PATH")
        return RecordedJudge(recording)
    raise ValueError(f"unknown judge {name!r}; expected 'mock' or 'recorded'")


def _fresh_model(cfg: RunConfig, vocab) -> ForensicModel:
    return ForensicModel.create(cfg.stack, seed=derived_seed(cfg.master_seed, "model"),
                                vocab=vocab)


def _load_model_for(args, path: str, vocab) -> tuple[ForensicModel, dict]:
    """Checkpoints are self-describing; branch flags override the stored dims."""
    model, header = load_model(path, vocab)
    if getattr(args, "no_spectral", False):
        model.dims = dataclasses.replace(model.dims, use_spectral=False)
    if getattr(args, "no_pixel", False):
        model.dims = dataclasses.replace(model.dims, use_pixel=False)
    return model, header


def _checkpoint_extra(cfg: RunConfig) -> dict:
    return {
        "master_seed": cfg.master_seed,
        "injection": {"stage_gated": cfg.stage_gated, "zero_evidence": cfg.zero_evidence},
    }


def _join_pool(ds, rows: list[dict]) -> list:
    from .training import PolicySample

    by_id = {s.sample_id: s for s in ds.train}
    pool = []
    for row in rows:
        sid = row["sample_id"]
        if sid not in by_id:
            raise ValueError(f"sample {sid!r} is not in the dataset's training split")
        s = by_id[sid]
        tokens = tuple(row["tokens"]) if row.get("tokens") else None
        pool.append(PolicySample(sid, s.image, s.masks, s.label, tokens))
    return pool


# ---------------------------------------------------------------------------
# Subcommands


def _cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    ds = gen_dataset(cfg.data, cfg.master_seed)
    save_dataset(ds, args.out)
    write_resolved(cfg, args.out)
    n_levels = sum(len(v) for v in ds.test_levels.values())
    print(f"wrote {len(ds.train)} training and {n_levels} evaluation samples to {args.out}")
    return 0


def _cmd_annotate(args) -> int:
    cfg = _resolve(args)
    vocab = get_vocab()
    ds = load_dataset(args.data)
    truth = ds.ground_truth_map()
    seed = derived_seed(cfg.master_seed, "annotation")
    clients = [
        MockPerceptionClient(f"client-{i}", truth,
                             hallucination_rate=cfg.hallucination_rate, seed=seed + i)
        for i in range(cfg.n_clients)
    ]
    model = _fresh_model(cfg, vocab)
    records = []
    for s in ds.train:
        bundle = model.frozen_bundle_for(s.image, s.masks)
        records.append(annotate_sample(s.sample_id, s.label, bundle, clients,
                                       k=cfg.k_roi, vocab=vocab))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_annotations(out / "annotations.jsonl", records)
    write_resolved(cfg, out)
    done = sum(1 for r in records if r.status == "ANNOTATED")
    print(f"annotated {done}/{len(records)} samples -> {out / 'annotations.jsonl'}")
    return 0


def _cmd_sft(args) -> int:
    cfg = _resolve(args, sft_epochs=args.epochs, sft_lr=args.lr,
                   sft_batch_size=args.batch, sft_optimizer=args.optimizer)
    vocab = get_vocab()
    ds = load_dataset(args.data)
    records = load_annotations(args.annotations, vocab)
    samples = {s.sample_id: s for s in ds.train}
    d1 = sft_pool(samples, records)
    if not d1:
        raise ValueError("no annotated samples to train on")
    model = _fresh_model(cfg, vocab)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "sft_log.jsonl").open("w") as log:
        run_sft(d1, model, epochs=cfg.sft_epochs, lr=cfg.sft_lr,
                batch_size=cfg.sft_batch_size, optimizer=cfg.sft_optimizer,
                seed=derived_seed(cfg.master_seed, "sft"), mode=_mode(cfg),
                vocab=vocab, log=log)
    sha = save_model(out / "stage1.pgm", model, training_stage="stage1",
                     extra=_checkpoint_extra(cfg))
    write_resolved(cfg, out)
    print(f"stage1 checkpoint {sha[:12]} <- {len(d1)} examples -> {out / 'stage1.pgm'}")
    return 0


def _cmd_self_train(args) -> int:
    cfg = _resolve(args, reject_candidates=args.candidates,
                   reject_temperature=args.temperature)
    vocab = get_vocab()
    ds = load_dataset(args.data)
    records = load_annotations(args.annotations, vocab)
    samples = {s.sample_id: s for s in ds.train}
    d2 = rl_pool(samples, records)
    model, header = _load_model_for(args, args.model, vocab)
    d3, d4 = rejection_sample(
        d2, model, m_candidates=cfg.reject_candidates,
        temperature=cfg.reject_temperature,
        seed=derived_seed(cfg.master_seed, "reject"), judge=MockJudge(),
        weights=cfg.weights, max_len=cfg.max_len, mode=_mode(cfg), vocab=vocab)
    if args.review:
        d3, d4 = apply_candidate_review(d3, d4, load_review_rejections(args.review))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "d3.jsonl").open("w") as fh:
        for p in d3:
            fh.write(json.dumps({"sample_id": p.sample_id, "label": p.label,
                                 "tokens": list(p.tokens)}) + "\n")
    with (out / "d4.jsonl").open("w") as fh:
        for p in d4:
            fh.write(json.dumps({"sample_id": p.sample_id, "label": p.label}) + "\n")
    if d3:
        with (out / "stage2_log.jsonl").open("w") as log:
            run_sft(d3, model, epochs=1, lr=cfg.sft_lr,
                    batch_size=cfg.sft_batch_size, optimizer=cfg.sft_optimizer,
                    seed=derived_seed(cfg.master_seed, "stage2"), mode=_mode(cfg),
                    vocab=vocab, log=log)
    sha = save_model(out / "stage2.pgm", model, training_stage="stage2",
                     parent_sha256=header["sha256"], extra=_checkpoint_extra(cfg))
    write_resolved(cfg, out)
    print(f"stage2 checkpoint {sha[:12]}: curated {len(d3)}, residual {len(d4)}")
    return 0


def _cmd_grpo(args) -> int:
    grpo_overrides = {
        "grpo.group_size": args.group_size, "grpo.batch_size": args.batch_size,
        "grpo.lr": args.lr, "grpo.clip": args.clip, "grpo.kl_beta": args.kl_beta,
        "grpo.temperature": args.temperature,
        "grpo.train_encoders": True if args.unfreeze_encoders else None,
    }
    cfg = _resolve(args, grpo_steps=args.steps, **grpo_overrides)
    vocab = get_vocab()
    ds = load_dataset(args.data)
    if args.pool:
        rows = [json.loads(line) for line in Path(args.pool).read_text().splitlines()
                if line.strip()]
        d4 = _join_pool(ds, rows)
    elif args.annotations:
        records = load_annotations(args.annotations, vocab)
        d4 = rl_pool({s.sample_id: s for s in ds.train}, records)
    else:
        raise ValueError("provide --pool (d4.jsonl) or --annotations")
    if not d4:
        raise ValueError("the optimization pool is empty")
    model, header = _load_model_for(args, args.model, vocab)
    judge = _make_judge(args.judge, args.judge_recording)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "metrics.jsonl").open("w") as log:
        run_grpo(d4, model, judge, cfg.grpo, steps=cfg.grpo_steps,
                 seed=derived_seed(cfg.master_seed, "grpo"), weights=cfg.weights,
                 mode=_mode(cfg), vocab=vocab, log=log)
    sha = save_model(out / "stage3.pgm", model, training_stage="stage3",
                     parent_sha256=header["sha256"], extra=_checkpoint_extra(cfg))
    write_resolved(cfg, out)
    print(f"stage3 checkpoint {sha[:12]} after {cfg.grpo_steps} steps "
          f"over {len(d4)} queries")
    return 0


def _cmd_eval(args) -> int:
    cfg = _resolve(args)
    vocab = get_vocab()
    ds = load_dataset(args.data)
    model, header = _load_model_for(args, args.model, vocab)
    mode = _injection_from_header(args, cfg, header)
    levels = ds.test_levels
    if args.levels:
        wanted = {int(x) for x in args.levels.split(",")}
        levels = {k: v for k, v in levels.items() if k in wanted}
        if not levels:
            raise ValueError(f"no evaluation levels match {sorted(wanted)}")
    report = evaluate_levels(levels, predictor(model, max_len=cfg.max_len,
                                               mode=mode, vocab=vocab), vocab,
                             checkpoint=header["sha256"], master_seed=ds.master_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    write_resolved(cfg, out)
    for row in report["levels"]:
        print(f"level {row['level']} ({row['name']}): "
              f"accuracy {row['accuracy']:.3f} over {row['n']} samples")
    print(f"overall accuracy {report['overall']['accuracy']:.3f}")
    return 0


def _cmd_perturb_eval(args) -> int:
    cfg = _resolve(args)
    vocab = get_vocab()
    ds = load_dataset(args.data)
    model, header = _load_model_for(args, args.model, vocab)
    mode = _injection_from_header(args, cfg, header)
    try:
        samples = ds.test_levels[args.level]
    except KeyError:
        raise ValueError(f"dataset has no evaluation level {args.level}") from None
    report = robustness_report(samples, predictor(model, max_len=cfg.max_len,
                                                  mode=mode, vocab=vocab), vocab,
                               checkpoint=header["sha256"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "robustness.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    write_resolved(cfg, out)
    for row in report["conditions"]:
        label = row["kind"] if row["value"] is None else f"{row['kind']}={row['value']:g}"
        print(f"{label}: accuracy {row['accuracy']:.3f}")
    return 0


def _injection_from_header(args, cfg: RunConfig, header: dict) -> InjectionMode:
    """Evaluation uses the mode a checkpoint was trained with, unless
    ablation flags explicitly override it."""
    stored = (header.get("extra") or {}).get("injection")
    if stored and not (args.no_stage_gate or args.zero_evidence):
        return InjectionMode(stage_gated=stored["stage_gated"],
                             zero_evidence=stored["zero_evidence"])
    return _mode(cfg)


def _cmd_score(args) -> int:
    cfg = _resolve(args)
    vocab = get_vocab()
    ds = load_dataset(args.data)
    judge = _make_judge(args.judge, args.judge_recording)
    by_id = {s.sample_id: s for s in ds.all_samples()}
    rows = [json.loads(line) for line in Path(args.transcripts).read_text().splitlines()
            if line.strip()]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w") as fh:
        for row in rows:
            sid = row["sample_id"]
            if sid not in by_id:
                raise ValueError(f"transcript references unknown sample {sid!r}")
            s = by_id[sid]
            breakdown = compute_reward(tuple(row["tokens"]), s.label, s.masks,
                                       judge, weights=cfg.weights, vocab=vocab)
            fh.write(json.dumps({"sample_id": sid, **breakdown.to_json()},
                                sort_keys=True) + "\n")
    print(f"scored {len(rows)} transcripts -> {out}")
    return 0


def _cmd_elo(args) -> int:
    table = EloTable(k=args.k, initial=args.initial)
    rows = [json.loads(line) for line in Path(args.games).read_text().splitlines()
            if line.strip()]
    for row in rows:
        table.record(row["a"], row["b"], row["outcome"])
    table.save(args.out)
    for name, rating in table.standings():
        print(f"{rating:8.1f}  {name}")
    return 0


# ---------------------------------------------------------------------------
# Wiring


def _build_parser() -> _Parser:
    parser = _Parser(prog="partscope", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("annotate", help="run the mock annotation pipeline")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(fn=_cmd_annotate)

    p = sub.add_parser("sft", help="stage 1: supervised fine-tuning")
    p.add_argument("--data", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--optimizer", choices=("sgd", "adam"))
    _add_config_flags(p)
    _add_ablation_flags(p)
    p.set_defaults(fn=_cmd_sft)

    p = sub.add_parser("self-train", help="stage 2: rejection-sampling self-training")
    p.add_argument("--data", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--candidates", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--review", help="JSONL of reviewer-rejected sample ids")
    _add_config_flags(p)
    _add_ablation_flags(p)
    p.set_defaults(fn=_cmd_self_train)

    p = sub.add_parser("grpo", help="stage 3: reward optimization")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pool", help="d4.jsonl from self-train")
    p.add_argument("--annotations", help="fall back to annotation failures")
    p.add_argument("--steps", type=int)
    p.add_argument("--group-size", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--clip", type=float)
    p.add_argument("--kl-beta", type=float)
    p.add_argument("--temperature", type=float)
    p.add_argument("--unfreeze-encoders", action="store_true")
    p.add_argument("--judge", default="mock", choices=("mock", "recorded"))
    p.add_argument("--judge-recording")
    _add_config_flags(p)
    _add_ablation_flags(p)
    p.set_defaults(fn=_cmd_grpo)

    p = sub.add_parser("eval", help="leveled accuracy report")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--levels", help="comma-separated level ids (default: all)")
    _add_config_flags(p)
    _add_ablation_flags(p)
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("perturb-eval", help="robustness grid under degradations")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--level", type=int, default=1)
    _add_config_flags(p)
    _add_ablation_flags(p)
    p.set_defaults(fn=_cmd_perturb_eval)

    p = sub.add_parser("score", help="reward breakdowns for external transcripts")
    p.add_argument("--data", required=True)
    p.add_argument("--transcripts", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--judge", default="mock", choices=("mock", "recorded"))
    p.add_argument("--judge-recording")
    _add_config_flags(p)
    p.set_defaults(fn=_cmd_score)

    p = sub.add_parser("elo", help="replay pairwise games into ratings")
    p.add_argument("--games", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=float, default=32.0)
    p.add_argument("--initial", type=float, default=1000.0)
    p.set_defaults(fn=_cmd_elo)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except _UsageError as err:
        print(str(err), file=sys.stderr)
        return 1
    except _VALIDATION_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except _RUNTIME_ERRORS as err:
        print(f"runtime failure: {err}", file=sys.stderr)
        if isinstance(err, TrainingDivergedError) and err.diagnostics:
            print(f"diagnostics: {err.diagnostics}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
