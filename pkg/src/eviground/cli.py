"""Command-line surface for the whole pipeline.

Exit codes: 0 success, 1 validation/usage error, 2 I/O error. Every
subcommand that writes outputs also records a run.json with the resolved
configuration and seed, so reruns reproduce identical artifacts.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import gradcheck, metrics
from .cohort import Cohort, generate_cohort
from .config import RunConfig
from .distill import (
    TeacherGrounder,
    generated_reports_for,
    label_efficiency_experiment,
    train_student,
)
from .errors import EvigroundError, MissingCheckpointError, ValidationError
from .grounding import train_grounding
from .policy import ReportPolicy, sample_group, train_rft
from .pretrain import pretrain_data_from_cohort, run_pretrain
from .report import parse_report
from .rules import LexicalEntailmentScorer, RuleConfig, total_reward
from .segdecoder import SegDecoder
from .textenc import Embedder


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="eviground", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    def add(name, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--config", help="JSON run-config overrides")
        p.add_argument("--seed", type=int, help="override the config seed")
        return p

    p = add("generate-cohort", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, help="number of patients")

    p = add("pretrain", help="alignment-stage training over the cohort")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)

    p = add("train-sea", help="train the grounding embedder and mask decoder")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)

    p = add("distill", help="distill a student from a trained grounder")
    p.add_argument("--cohort", required=True)
    p.add_argument("--teacher", required=True, help="train-sea output directory")
    p.add_argument("--out", required=True)

    p = add("label-efficiency", help="teacher/student R@3 across label fractions")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fractions", default="0.25,0.5,1.0")

    p = add("train-grpo", help="reinforcement fine-tuning of the report policy")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--plots", action="store_true")

    p = add("score-report", help="print a reward breakdown JSON for one report")
    p.add_argument("--report", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--cohort", required=True)

    p = add("eval-grounding", help="retrieval and Dice metrics on a split")
    p.add_argument("--cohort", required=True)
    p.add_argument("--checkpoint", required=True, help="train-sea output directory")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--plots", action="store_true")

    p = add("eval-consistency", help="accuracy/format/guideline/entailment table")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--policy", help="policy checkpoint directory")
    p.add_argument("--reports", help="directory of <patient_id>.txt reports")
    p.add_argument("--split", default="test")

    p = add("gradcheck", help="finite-difference verification of all gradients")
    p.add_argument("--seeds", type=int, default=50)

    return parser


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2**64:
            raise ValidationError("--seed must be an unsigned 64-bit integer")
        cfg.seed = args.seed
    return cfg


def _write_run_json(out: Path, command: str, cfg: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "seed": cfg.seed, "config": cfg.to_json()}
    (out / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True))


def _load_checkpoint(path: str) -> tuple[Embedder, SegDecoder | None]:
    root = Path(path)
    if not (root / "embedder" / "manifest.json").exists():
        raise MissingCheckpointError(f"no embedder checkpoint under {root}")
    emb = Embedder.load(root / "embedder")
    dec = None
    if (root / "decoder" / "manifest.json").exists():
        dec = SegDecoder.load(root / "decoder")
    return emb, dec


def _cmd_generate_cohort(args) -> int:
    cfg = _resolve_config(args)
    cfg.cohort.seed = cfg.seed
    if args.n is not None:
        cfg.cohort.n_patients = args.n
    out = Path(args.out)
    manifest = generate_cohort(cfg.cohort, out)
    _write_run_json(out, "generate-cohort", cfg)
    print(f"wrote {len(manifest['files'])} files under {out}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    cfg.pretrain.seed = cfg.seed
    cohort = Cohort.load(args.cohort)
    data = pretrain_data_from_cohort(cohort, "train", cfg.pretrain)
    history = run_pretrain(data, cfg.pretrain)
    out = Path(args.out)
    _write_run_json(out, "pretrain", cfg)
    metrics.write_rows_csv(
        out / "pretrain_log.csv", history, ["step", "l_itc", "l_res_v", "l_res_t", "l_pt"]
    )
    print(f"l_pt {history[0]['l_pt']:.4f} -> {history[-1]['l_pt']:.4f}")
    return 0


def _cmd_train_sea(args) -> int:
    cfg = _resolve_config(args)
    cfg.grounder.seed = cfg.seed
    cohort = Cohort.load(args.cohort)
    emb, dec, history = train_grounding(cohort, cfg.grounder)
    out = Path(args.out)
    _write_run_json(out, "train-sea", cfg)
    emb.save(out / "embedder")
    if dec is not None:
        dec.save(out / "decoder")
    rows = [
        {"epoch": i, "l_se": v, "l_mask": ""}
        for i, v in enumerate(history["l_se"])
    ]
    for i, v in enumerate(history["l_mask"]):
        if i < len(rows):
            rows[i]["l_mask"] = v
        else:
            rows.append({"epoch": i, "l_se": "", "l_mask": v})
    metrics.write_rows_csv(out / "grounding_log.csv", rows, ["epoch", "l_se", "l_mask"])
    print(f"l_se {history['l_se'][0]:.4f} -> {history['l_se'][-1]:.4f}")
    return 0


def _cmd_distill(args) -> int:
    cfg = _resolve_config(args)
    cfg.distill.seed = cfg.seed
    cohort = Cohort.load(args.cohort)
    emb, dec = _load_checkpoint(args.teacher)
    teacher = TeacherGrounder(emb, tau=cfg.grounder.tau, decoder=dec, trained=True)
    reports = generated_reports_for(cohort, cohort.split["train"])
    student, curve = train_student(reports, teacher, cfg.distill)
    out = Path(args.out)
    _write_run_json(out, "distill", cfg)
    student.save(out / "embedder")
    metrics.write_rows_csv(
        out / "distill_log.csv",
        [{"epoch": i, "loss": v} for i, v in enumerate(curve)],
        ["epoch", "loss"],
    )
    print(f"distill loss {curve[0]:.6f} -> {curve[-1]:.6f}")
    return 0


def _cmd_label_efficiency(args) -> int:
    cfg = _resolve_config(args)
    cfg.distill.seed = cfg.seed
    try:
        fractions = [float(x) for x in args.fractions.split(",") if x]
    except ValueError as exc:
        raise ValidationError(f"bad --fractions: {exc}") from exc
    cohort = Cohort.load(args.cohort)
    grounder_cfg = cfg.grounder
    grounder_cfg.train_decoder = False
    rows = label_efficiency_experiment(cohort, fractions, cfg.distill, grounder_cfg)
    out = Path(args.out)
    _write_run_json(out, "label-efficiency", cfg)
    metrics.write_rows_csv(
        out / "label_efficiency.csv", rows, ["fraction", "teacher_r3", "student_r3", "ratio"]
    )
    for row in rows:
        print(
            f"fraction {row['fraction']:.2f}: teacher {row['teacher_r3']:.3f} "
            f"student {row['student_r3']:.3f} ratio {row['ratio']:.3f}"
        )
    return 0


def _cmd_train_grpo(args) -> int:
    import dataclasses

    cfg = _resolve_config(args)
    cfg.rft.seed = cfg.seed
    if args.iters is not None:
        cfg.rft = dataclasses.replace(cfg.rft, iters=args.iters)
    cohort = Cohort.load(args.cohort)
    scorer = LexicalEntailmentScorer(cohort.rules)
    patients = [cohort.records[pid] for pid in cohort.split["train"]]
    policy = ReportPolicy(seed=cfg.seed, rules=cohort.rules)
    policy, rows = train_rft(policy, patients, cohort.rules, scorer, cfg.rft)
    out = Path(args.out)
    _write_run_json(out, "train-grpo", cfg)
    policy.save(out / "policy")
    metrics.write_rows_csv(
        out / "rft_log.csv",
        rows,
        ["iter", "mean_reward", "r_format", "r_nia", "r_consistency", "kl_ref"],
    )
    if args.plots:
        _plot_reward_curve(rows, out / "plots")
    print(f"mean reward {rows[0]['mean_reward']:.3f} -> {rows[-1]['mean_reward']:.3f}")
    return 0


def _cmd_score_report(args) -> int:
    """Here --config names a rules.json, not a run config."""
    cohort = Cohort.load(args.cohort)
    if args.patient not in cohort.records:
        raise ValidationError(f"unknown patient {args.patient!r}")
    text = Path(args.report).read_text()
    record = cohort.records[args.patient]
    if args.config:
        try:
            rules = RuleConfig.load(args.config)
        except TypeError as exc:
            raise ValidationError(f"{args.config}: not a rules.json ({exc})") from exc
    else:
        rules = cohort.rules
    breakdown = total_reward(
        parse_report(text), record, rules, LexicalEntailmentScorer(rules)
    )
    print(json.dumps(breakdown.to_json(), indent=2, sort_keys=True))
    return 0


def _cmd_eval_grounding(args) -> int:
    cfg = _resolve_config(args)
    cohort = Cohort.load(args.cohort)
    emb, dec = _load_checkpoint(args.checkpoint)
    table = metrics.eval_grounding(emb, dec, cohort, args.split, tau=cfg.grounder.tau)
    out = Path(args.out)
    _write_run_json(out, "eval-grounding", cfg)
    metrics.write_metrics_csv(out / "metrics.csv", table)
    if args.plots:
        _plot_dice_bars(table, out / "plots")
    for key in sorted(table):
        print(f"{key}: {table[key]:.4f}")
    return 0


def _cmd_eval_consistency(args) -> int:
    cfg = _resolve_config(args)
    cohort = Cohort.load(args.cohort)
    scorer = LexicalEntailmentScorer(cohort.rules)
    ids = cohort.split[args.split]
    pairs = []
    if args.policy:
        policy = ReportPolicy.load(args.policy)
        policy.rules = cohort.rules
        rng = np.random.default_rng(cfg.seed)
        for pid in ids:
            record = cohort.records[pid]
            group = sample_group(policy, record, cfg.rft.group_size, rng.integers(2**63))
            pairs.extend((record, rollout.text) for rollout in group.rollouts)
    elif args.reports:
        for pid in ids:
            path = Path(args.reports) / f"{pid}.txt"
            if path.exists():
                pairs.append((cohort.records[pid], path.read_text()))
        if not pairs:
            raise ValidationError(f"no <patient>.txt reports for split {args.split!r} in {args.reports}")
    else:
        raise ValidationError("one of --policy or --reports is required")
    table = metrics.eval_consistency(pairs, cohort.rules, scorer)
    out = Path(args.out)
    _write_run_json(out, "eval-consistency", cfg)
    metrics.write_metrics_csv(out / "metrics.csv", table)
    for key in ("accuracy", "valid_format_rate", "nia_consistency_rate", "entailment_rate"):
        print(f"{key}: {table[key]:.4f}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(args.seeds)
    failed = False
    for name, err in results.items():
        ok = err < gradcheck.TOLERANCE
        failed |= not ok
        print(f"{name}: max rel err {err:.3e} [{'ok' if ok else 'FAIL'}]")
    return 1 if failed else 0


def _plot_reward_curve(rows, plot_dir: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib not installed; skipping plots", file=sys.stderr)
        return
    plot_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("mean_reward", "r_format", "r_nia", "r_consistency"):
        ax.plot([r["iter"] for r in rows], [r[key] for r in rows], label=key)
    ax.set_xlabel("iteration")
    ax.legend()
    fig.tight_layout()
    fig.savefig(plot_dir / "reward_curves.png", dpi=120)
    plt.close(fig)


def _plot_dice_bars(table: dict, plot_dir: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib not installed; skipping plots", file=sys.stderr)
        return
    keys = [k for k in sorted(table) if k.startswith("dice.")]
    if not keys:
        return
    plot_dir.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.arange(len(keys))
    ax.bar(x - 0.2, [table[k] for k in keys], width=0.4, label="evidence-conditioned")
    ax.bar(
        x + 0.2,
        [table[k.replace("dice.", "dice_ablated.")] for k in keys],
        width=0.4,
        label="cross-attention zeroed",
    )
    ax.set_xticks(x, [k.split(".", 1)[1] for k in keys], rotation=20)
    ax.set_ylabel("Dice")
    ax.legend()
    fig.tight_layout()
    fig.savefig(plot_dir / "dice_bars.png", dpi=120)
    plt.close(fig)


_COMMANDS = {
    "generate-cohort": _cmd_generate_cohort,
    "pretrain": _cmd_pretrain,
    "train-sea": _cmd_train_sea,
    "distill": _cmd_distill,
    "label-efficiency": _cmd_label_efficiency,
    "train-grpo": _cmd_train_grpo,
    "score-report": _cmd_score_report,
    "eval-grounding": _cmd_eval_grounding,
    "eval-consistency": _cmd_eval_consistency,
    "gradcheck": _cmd_gradcheck,
}


def cli_main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (ValidationError, EvigroundError) as exc:
        if isinstance(exc, MissingCheckpointError):
            print(f"error: {exc}", file=sys.stderr)
            return 2
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
