"""Command-line pipeline: plan, merge, reconstruct, inspect.

Exit codes: 2 alignment failure, 3 config/input parse failure,
4 plan/config fingerprint mismatch, 5 unknown task.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import re
import sys
from dataclasses import dataclass
from fractions import Fraction

from . import artifact as artifact_mod
from .errors import BlockMergeError, UnknownTask
from .mergers import ALGORITHMS, MergerConfig, expected_trim_ratio, prepare_task_vectors
from .scheduler import (
    MergePlan,
    SizeModel,
    compute_merge_plan,
    read_plan_jsonl,
    replay_to_size,
    write_assignment_json,
    write_plan_jsonl,
)
from .similarity import STRATEGIES, pairwise_all
from .task_space import PartitionRule, compute_task_vectors, partition
from .tensor_store import read_archive, validate_aligned, write_archive

EXIT_ALIGNMENT = 2
EXIT_PARSE = 3
EXIT_FINGERPRINT = 4
EXIT_UNKNOWN_TASK = 5

_ORDER_NAMES = {
    "greedy": "greedy",
    "ltr": "left_to_right",
    "rtl": "right_to_left",
    "random": "random",
}

PLAN_FILE = "plan.jsonl"
PLAN_META_FILE = "plan_meta.json"


@dataclass
class RunConfig:
    pretrained: str
    finetuned: list[str]
    rules_path: str | None
    merger: MergerConfig
    strategy: str
    order_policy: str
    seed: int
    sizes: list[Fraction]
    out: str


def _parse_rules_file(path: str | None) -> tuple[list[PartitionRule], list[str], dict]:
    """Rules JSON: {"rules": [{"pattern", "block_key"}], "exclude": [...],
    "merger": {...}}; every section optional."""
    if path is None:
        return [], [], {}
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    rules = [PartitionRule(r["pattern"], r["block_key"]) for r in obj.get("rules", [])]
    exclude = list(obj.get("exclude", []))
    merger = dict(obj.get("merger", {}))
    return rules, exclude, merger


def _build_config(args) -> RunConfig:
    rules, exclude, merger_section = _parse_rules_file(args.rules)
    overrides = dict(merger_section)
    overrides.pop("algorithm", None)
    algorithm = args.algorithm or merger_section.get("algorithm", "ta")
    if args.lam is not None:
        overrides["lam"] = args.lam
    if args.keep_ratio is not None:
        overrides["keep_ratio"] = args.keep_ratio
    if args.threshold is not None:
        overrides["consensus_threshold"] = args.threshold
    cfg = MergerConfig.for_algorithm(algorithm, **overrides)
    sizes = []
    for tok in (args.sizes or "").split(","):
        tok = tok.strip()
        if tok:
            sizes.append(Fraction(tok))
    return RunConfig(
        pretrained=args.pretrained,
        finetuned=list(args.finetuned),
        rules_path=args.rules,
        merger=cfg,
        strategy=args.strategy,
        order_policy=_ORDER_NAMES[args.order],
        seed=args.seed,
        sizes=sizes,
        out=args.out,
    )


def _file_sha(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def plan_fingerprint(config: RunConfig) -> str:
    """Everything the plan depends on: input bytes, rules, trim state,
    strategy, order, seed. The merge coefficient is deliberately excluded;
    it does not affect the schedule."""
    rules_blob = ""
    if config.rules_path:
        with open(config.rules_path, encoding="utf-8") as fh:
            rules_blob = fh.read()
    payload = json.dumps(
        {
            "pretrained": _file_sha(config.pretrained),
            "finetuned": [_file_sha(p) for p in config.finetuned],
            "rules": rules_blob,
            "trim_ratio": expected_trim_ratio(config.merger),
            "strategy": config.strategy,
            "order": config.order_policy,
            "seed": config.seed,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def _load_pipeline(config: RunConfig):
    pretrained = read_archive(config.pretrained)
    finetuned = [read_archive(p) for p in config.finetuned]
    rules, exclude, _ = _parse_rules_file(config.rules_path)
    report = validate_aligned(pretrained, finetuned, exclude)
    if not report.ok:
        for name, kind in report.mismatches[:20]:
            print(f"alignment mismatch: {name} ({kind})", file=sys.stderr)
        raise SystemExit(EXIT_ALIGNMENT)
    part = partition(pretrained, rules, exclude)
    tv = compute_task_vectors(pretrained, finetuned, part)
    tv = prepare_task_vectors(tv, config.merger)
    return pretrained, finetuned, part, tv


def _safe_key(key: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", key)


def _write_similarity_csvs(matrices, block_keys, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for mx, key in zip(matrices, block_keys):
        path = os.path.join(out_dir, f"block_{mx.block_id:04d}_{_safe_key(key)}.csv")
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["task"] + [str(j) for j in range(mx.num_tasks)])
            for i in range(mx.num_tasks):
                writer.writerow([str(i)] + [repr(float(v)) for v in mx.values[i]])


def cmd_plan(args) -> int:
    config = _build_config(args)
    _, _, part, tv = _load_pipeline(config)
    matrices = pairwise_all(tv)
    zero_blocks = [(mx.block_id, mx.zero_tasks) for mx in matrices if mx.zero_tasks]
    for block_id, tasks in zero_blocks:
        print(f"note: block {block_id} has all-zero task vectors for tasks {list(tasks)}; "
              "their similarity is 0 by convention", file=sys.stderr)
    plan = compute_merge_plan(
        tv, strategy=config.strategy, order_policy=config.order_policy,
        seed=config.seed, matrices=matrices,
    )
    os.makedirs(config.out, exist_ok=True)
    write_plan_jsonl(plan, os.path.join(config.out, PLAN_FILE))
    meta = {
        "fingerprint": plan_fingerprint(config),
        "strategy": config.strategy,
        "order": config.order_policy,
        "seed": config.seed,
        "num_tasks": plan.num_tasks,
        "num_blocks": plan.num_blocks,
        "block_keys": list(plan.block_keys),
        "algorithm": config.merger.algorithm,
        "trim_ratio": expected_trim_ratio(config.merger),
    }
    with open(os.path.join(config.out, PLAN_META_FILE), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_similarity_csvs(matrices, part.block_keys, os.path.join(config.out, "similarity"))
    print(f"plan: {len(plan.events)} events over {plan.num_blocks} blocks -> {config.out}")
    return 0


def _load_plan_checked(plan_path: str, config: RunConfig) -> MergePlan:
    meta_path = os.path.join(os.path.dirname(plan_path) or ".", PLAN_META_FILE)
    try:
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read plan metadata {meta_path}: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_PARSE)
    if meta.get("fingerprint") != plan_fingerprint(config):
        print("plan fingerprint does not match the current inputs/config", file=sys.stderr)
        raise SystemExit(EXIT_FINGERPRINT)
    return read_plan_jsonl(
        plan_path,
        strategy=meta["strategy"],
        order_policy=meta["order"],
        seed=meta["seed"],
        num_tasks=meta["num_tasks"],
        num_blocks=meta["num_blocks"],
        block_keys=tuple(meta["block_keys"]),
    )


def _size_dir_token(size: Fraction) -> str:
    if size.denominator == 1:
        return str(size.numerator)
    as_float = float(size)
    if Fraction(str(as_float)) == size:
        return str(as_float)
    return f"{size.numerator}_{size.denominator}"


def cmd_merge(args) -> int:
    config = _build_config(args)
    if not config.sizes:
        print("--sizes is required for merge", file=sys.stderr)
        return EXIT_PARSE
    pretrained, finetuned, part, tv = _load_pipeline(config)
    if args.plan:
        plan = _load_plan_checked(args.plan, config)
    else:
        plan = compute_merge_plan(tv, strategy=config.strategy,
                                  order_policy=config.order_policy, seed=config.seed)
    sm = SizeModel.from_partition(part, config.merger)
    fingerprint = plan_fingerprint(config)
    os.makedirs(config.out, exist_ok=True)
    for target in config.sizes:
        assignment = replay_to_size(plan, tv, target, sm)
        art = artifact_mod.build_artifact(
            assignment, tv, pretrained, config.merger,
            finetuned=finetuned, fingerprint=fingerprint,
        )
        out_dir = os.path.join(config.out, f"size_{_size_dir_token(target)}")
        artifact_mod.export_manifest(art, out_dir)
        write_assignment_json(assignment, part.block_keys, os.path.join(out_dir, "groups.json"))
        achieved = art.size_report.units
        print(
            f"target {float(target):g}: achieved {float(achieved):.6g} "
            f"({achieved.numerator}/{achieved.denominator}) after "
            f"{assignment.applied_events} events -> {out_dir}"
        )
    return 0


def cmd_reconstruct(args) -> int:
    try:
        art = artifact_mod.load_artifact(args.artifact)
    except (OSError, json.JSONDecodeError, KeyError, BlockMergeError) as exc:
        print(f"cannot load artifact from {args.artifact}: {exc}", file=sys.stderr)
        return EXIT_PARSE
    try:
        ckpt = artifact_mod.reconstruct_task(art, args.task)
    except UnknownTask as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_UNKNOWN_TASK
    write_archive(ckpt, args.out)
    print(f"task {args.task} -> {args.out}")
    return 0


def _inspect_plan(plan_dir: str, plan_path: str, out_dir: str) -> int:
    meta = {}
    meta_path = os.path.join(plan_dir, PLAN_META_FILE)
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    plan = read_plan_jsonl(plan_path)
    keys = meta.get("block_keys") or [str(b) for b in range(plan.num_blocks)]
    seqs: dict[int, list[int]] = {}
    for ev in plan.events:
        seqs.setdefault(ev.block_id, []).append(ev.seq)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "selection_timestep.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block_id", "block_key", "events", "avg_selection_timestep"])
        for b in range(plan.num_blocks):
            ss = seqs.get(b, [])
            avg = sum(ss) / len(ss) if ss else ""
            writer.writerow([b, keys[b] if b < len(keys) else str(b), len(ss), avg])
    print(f"selection timesteps -> {path}")
    return 0


def _inspect_artifact(art_dir: str, out_dir: str) -> int:
    art = artifact_mod.load_artifact(art_dir)
    os.makedirs(out_dir, exist_ok=True)
    clusters: dict[int, int] = {}
    for g in art.groups:
        clusters[g.block_id] = clusters.get(g.block_id, 0) + 1
    path = os.path.join(out_dir, "clusters_per_block.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["block_id", "block_key", "clusters"])
        for block in art.partition.blocks:
            writer.writerow([block.block_id, block.key, clusters.get(block.block_id, 0)])
    rep = art.size_report
    lines = [
        ("dense bytes", rep.dense_bytes),
        ("mask bytes", rep.mask_bytes),
        ("pretrained bytes", rep.pretrained_bytes),
        ("scalar bytes (not counted)", rep.scalar_bytes),
        ("head bytes (not counted)", rep.head_bytes),
        ("unit bytes", rep.unit_bytes),
    ]
    width = max(len(label) for label, _ in lines)
    print(f"artifact {art_dir}: algorithm={art.config.algorithm} tasks={art.num_tasks}")
    for label, value in lines:
        print(f"  {label:<{width}} {value}")
    print(f"  size: {float(rep.units):.6g} model units ({rep.units.numerator}/{rep.units.denominator})")
    sizes_path = os.path.join(out_dir, "size_breakdown.csv")
    with open(sizes_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["field", "value"])
        for key, value in rep.as_dict().items():
            writer.writerow([key, value])
    print(f"cluster counts -> {path}")
    return 0


def cmd_inspect(args) -> int:
    target = args.input
    try:
        if os.path.isdir(target):
            if os.path.exists(os.path.join(target, artifact_mod.MANIFEST_NAME)):
                return _inspect_artifact(target, args.out)
            if os.path.exists(os.path.join(target, PLAN_FILE)):
                return _inspect_plan(target, os.path.join(target, PLAN_FILE), args.out)
            print(f"{target}: no manifest or plan found", file=sys.stderr)
            return EXIT_PARSE
        if target.endswith(".jsonl"):
            return _inspect_plan(os.path.dirname(target) or ".", target, args.out)
        print(f"{target}: expected an artifact directory or plan JSONL", file=sys.stderr)
        return EXIT_PARSE
    except (OSError, json.JSONDecodeError, KeyError, BlockMergeError) as exc:
        print(f"cannot inspect {target}: {exc}", file=sys.stderr)
        return EXIT_PARSE


def _add_pipeline_flags(p: argparse.ArgumentParser, need_sizes: bool) -> None:
    p.add_argument("--pretrained", required=True, help="pretrained checkpoint archive")
    p.add_argument("--finetuned", action="append", required=True,
                   help="fine-tuned checkpoint archive; repeat per task (task id = position)")
    p.add_argument("--rules", default=None, help="partition rules JSON")
    p.add_argument("--algorithm", default=None, choices=ALGORITHMS,
                   help="merging algorithm (default ta, or the rules file's merger section)")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="merge coefficient (ta default 1.5, ties/pcb 1.0)")
    p.add_argument("--keep-ratio", type=float, default=None,
                   help="trim keep ratio for ties/consensus/pcb")
    p.add_argument("--threshold", type=float, default=None,
                   help="consensus mask extraction threshold (default 0.6)")
    p.add_argument("--strategy", default="min", choices=STRATEGIES)
    p.add_argument("--order", default="greedy", choices=sorted(_ORDER_NAMES))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", default="" if not need_sizes else None,
                   required=need_sizes,
                   help='comma-separated target sizes in model units, e.g. "1,1.5,2.25"')
    p.add_argument("--out", required=True, help="output directory")


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; keep 2 reserved for alignment
    failures and report usage problems as parse failures instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_PARSE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="blockmerge",
                     description="flexible-size data-free model merging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="precompute similarities and the global merge order")
    _add_pipeline_flags(p, need_sizes=False)
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("merge", help="replay a plan to one or more target sizes")
    _add_pipeline_flags(p, need_sizes=True)
    p.add_argument("--plan", default=None, help="plan JSONL from `blockmerge plan` (optional)")
    p.set_defaults(fn=cmd_merge)

    p = sub.add_parser("reconstruct", help="write one task's checkpoint from an artifact")
    p.add_argument("--artifact", required=True, help="artifact directory")
    p.add_argument("--task", type=int, required=True)
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("inspect", help="report cluster counts, merge order and sizes")
    p.add_argument("--input", required=True, help="artifact directory or plan JSONL")
    p.add_argument("--out", required=True, help="directory for CSV reports")
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except SystemExit as exc:
        if exc.code is None:
            return 0
        return exc.code if isinstance(exc.code, int) else EXIT_PARSE
    except (json.JSONDecodeError, ValueError, KeyError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except BlockMergeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
