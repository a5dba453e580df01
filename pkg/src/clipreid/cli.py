"""Command-line entry point: ``clipreid <command> [options]``.

Every command that trains or evaluates writes into a fresh run directory
(``--run-dir``, or ``$CLIPREID_OUTPUT_ROOT/<command>-<digest>``) holding a
frozen ``config.txt``, its artifacts and a ``manifest.json`` written last.
Existing run directories are never touched.

Exit codes: 0 ok, 1 IO or config error, 2 missing prerequisite, 3 training failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .config import Config
from .errors import (
    CLIPReIDError,
    ConfigError,
    MissingDependencyError,
    NumericalError,
    TrainingError,
)

OUTPUT_ROOT_ENV = "CLIPREID_OUTPUT_ROOT"
EXIT_OK, EXIT_IO, EXIT_MISSING, EXIT_TRAINING = 0, 1, 2, 3


def code_version_hash(version: str = __version__) -> str:
    """Git blob hash of the version string."""
    data = version.encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_atomic(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


@dataclass
class RunManifest:
    command: str
    config_hash: str
    checkpoints: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    wall_clock_s: float = 0.0
    code_version: str = field(default_factory=code_version_hash)
    extra: dict = field(default_factory=dict)

    def save(self, run_dir) -> Path:
        path = Path(run_dir) / "manifest.json"
        write_atomic(path, json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


class Run:
    """A run directory that must not exist yet; created on entry."""

    def __init__(self, path, command: str, cfg: Config):
        self.path = Path(path)
        self.command = command
        self.cfg = cfg
        if self.path.exists():
            raise FileExistsError(f"run directory {self.path} already exists")
        if not self.path.parent.exists():
            raise IOError(f"parent directory of {self.path} does not exist")
        self.path.mkdir()
        (self.path / "config.txt").write_text(cfg.to_text())
        self.manifest = RunManifest(command=command, config_hash=cfg.digest())
        self._start = time.perf_counter()

    def finish(self, **extra) -> Path:
        self.manifest.wall_clock_s = round(time.perf_counter() - self._start, 3)
        self.manifest.extra.update(extra)
        return self.manifest.save(self.path)


def _output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _run_path(args, command: str, cfg: Config, *inputs) -> Path:
    if getattr(args, "run_dir", None):
        return Path(args.run_dir)
    material = json.dumps([command, cfg.digest(), [str(Path(i).resolve()) for i in inputs if i]])
    root = _output_root()
    root.mkdir(parents=True, exist_ok=True)
    return root / f"{command}-{hashlib.sha256(material.encode()).hexdigest()[:10]}"


def _resolve_config(args, base: dict | None = None) -> Config:
    cfg = Config(base)
    if getattr(args, "config", None):
        from .config import parse_text
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise IOError(f"cannot read config file {args.config}: {exc}") from exc
        for k, v in parse_text(text).items():
            cfg.set(k, v)
    cfg.apply_overrides(getattr(args, "set", None) or [])
    if getattr(args, "deterministic", False):
        cfg.set("deterministic", True)
    return cfg


def _checkpoint_dir(path) -> Path:
    p = Path(path)
    return p / "checkpoint" if (p / "checkpoint" / "checkpoint.json").exists() else p


def _load_checkpoint(path):
    from .training import Checkpoint
    return Checkpoint.load(_checkpoint_dir(path))


def _load_dataset(path):
    from .data import load_dataset
    return load_dataset(path)


def _print_table(header, rows, out=None):
    out = out or sys.stdout
    cells = [list(map(str, header))] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for r in cells:
        print("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip(), file=out)


def _fmt(v):
    if isinstance(v, bool):
        return "x" if v else "-"
    if isinstance(v, float):
        return f"{100 * v:.1f}"
    return str(v)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    from .data import SyntheticSpec, generate_synthetic
    spec = SyntheticSpec(n_train_ids=args.ids, n_test_ids=args.test_ids or args.ids,
                         images_per_id=args.per_id, n_cameras=args.cams, image_hw=(args.hw, args.hw),
                         seed=args.seed, kind=args.kind, n_pretrain_ids=args.pretrain_ids)
    if args.nuisance != 1.0:
        for name in ("color_shift", "brightness", "blur", "jitter", "rotation", "scale_jitter", "noise"):
            setattr(spec, name, getattr(spec, name) * args.nuisance)
        spec.__post_init__()
    meta = generate_synthetic(spec, args.out, ctx_len=args.ctx_len)
    print(f"wrote {sum(meta['counts'].values())} images to {args.out}")
    return EXIT_OK


def _write_stage(run: Run, result) -> None:
    result.checkpoint.save(run.path / "checkpoint")
    run.manifest.checkpoints.append(str(run.path / "checkpoint"))


def cmd_train(args) -> int:
    from .training.pipeline import PREREQUISITE, train_stage
    init = None
    if args.stage != "stage0":
        if not args.init:
            raise MissingDependencyError(f"{args.stage} needs a {PREREQUISITE[args.stage]} checkpoint "
                                         f"(pass --init RUN_DIR)")
        init = _load_checkpoint(args.init)
        if args.stage == "stage2" and init.text_cache is None:
            raise MissingDependencyError(f"stage2 needs a stage-1 text feature cache; the checkpoint in "
                                         f"{args.init} comes from {init.stage!r}")
    cfg = _resolve_config(args, init.config if init else None)
    ds = _load_dataset(args.data)
    run = Run(_run_path(args, args.stage, cfg, args.data, args.init), f"train {args.stage}", cfg)
    result = train_stage(args.stage, cfg, ds, init, log_path=run.path / "losses.jsonl")
    _write_stage(run, result)
    run.finish(stage=args.stage, data=str(args.data), init=str(args.init or ""),
               train_seconds=round(result.seconds, 3))
    print(f"{args.stage}: {len(result.log.trace())} steps, final loss "
          f"{result.log.trace()[-1] if result.log.trace() else float('nan'):.4f} -> {run.path}")
    return EXIT_OK


def _evaluate(ckpt, cfg, ds):
    from .evaluation import evaluate_model
    from .training.pipeline import check_compatible
    check_compatible(ckpt, ds)
    model = ckpt.build_model(cfg)
    return evaluate_model(model, ds, cfg["eval.feature_mode"], cfg["eval.metric"], cfg["eval.batch"])


def _eval_overrides(args):
    sets = list(args.set or [])
    if args.feature_mode:
        sets.append(f"eval.feature_mode={args.feature_mode}")
    if args.metric:
        sets.append(f"eval.metric={args.metric}")
    args.set = sets


def cmd_eval(args) -> int:
    ckpt = _load_checkpoint(args.run)
    _eval_overrides(args)
    cfg = _resolve_config(args, ckpt.config)
    ds = _load_dataset(args.data)
    run = Run(_run_path(args, "eval", cfg, args.data, args.run), "eval", cfg)
    report, _ = _evaluate(ckpt, cfg, ds)
    report.save(run.path / "metrics.json")
    run.manifest.metrics.append(str(run.path / "metrics.json"))
    run.finish(checkpoint=str(_checkpoint_dir(args.run)), data=str(args.data))
    _print_table(["mAP", "R1", "R5", "R10"], [[report.mAP, report.rank(1), report.rank(5), report.rank(10)]])
    return EXIT_OK


def _sub_run(parent: Run, name: str, cfg: Config, command: str) -> Run:
    return Run(parent.path / name, command, cfg)


def _train_sub(parent: Run, name: str, stage: str, cfg, ds, init):
    from .training.pipeline import train_stage
    sub = _sub_run(parent, name, cfg, f"train {stage}")
    result = train_stage(stage, cfg, ds, init, log_path=sub.path / "losses.jsonl")
    _write_stage(sub, result)
    sub.finish(stage=stage, train_seconds=round(result.seconds, 3))
    parent.manifest.checkpoints.append(str(sub.path / "checkpoint"))
    return result


def _eval_sub(parent: Run, name: str, model, cfg, ds):
    from .evaluation import evaluate_model
    sub = _sub_run(parent, name, cfg, "eval")
    report, _ = evaluate_model(model, ds, cfg["eval.feature_mode"], cfg["eval.metric"], cfg["eval.batch"])
    report.save(sub.path / "metrics.json")
    sub.manifest.metrics.append(str(sub.path / "metrics.json"))
    manifest = sub.finish()
    parent.manifest.metrics.append(str(sub.path / "metrics.json"))
    return report, manifest


def _stage0_for(parent: Run, cfg, ds, init, cache: dict):
    """Pretrained stage-0 checkpoint matching ``cfg``; trains one under ``parent`` when needed."""
    from .training.pipeline import stage0_config, stage0_key
    base = stage0_config(cfg)
    key = stage0_key(base)
    if key not in cache:
        if init is not None and stage0_key(stage0_config(Config(init.config))) == key:
            cache[key] = init
        else:
            cache[key] = _train_sub(parent, f"stage0-{key}", "stage0", base, ds, None).checkpoint
    return cache[key]


def _recipe(parent: Run, prefix: str, recipe: str, cfg, ds, s0):
    from .training.pipeline import TWO_STAGE
    if recipe == TWO_STAGE:
        s1 = _train_sub(parent, f"{prefix}-stage1", "stage1", cfg, ds, s0)
        final = _train_sub(parent, f"{prefix}-stage2", "stage2", cfg, ds, s1.checkpoint)
    else:
        final = _train_sub(parent, f"{prefix}-{recipe}", recipe, cfg, ds, s0)
    return _eval_sub(parent, f"{prefix}-eval", final.model, cfg, ds)


def _init_or_none(args):
    return _load_checkpoint(args.init) if args.init else None


def cmd_sweep_m(args) -> int:
    try:
        ms = [int(m) for m in args.m.split(",") if m.strip()]
    except ValueError:
        raise ConfigError(f"--m expects a comma-separated list of integers, got {args.m!r}") from None
    if not ms:
        raise ConfigError("--m is empty")
    init = _init_or_none(args)
    cfg = _resolve_config(args, init.config if init else None)
    ds = _load_dataset(args.data)
    run = Run(_run_path(args, "sweep-m", cfg, args.data, args.init), "sweep-m", cfg)
    pool, rows = {}, []
    for m in ms:
        cfg_m = cfg.updated(**{"prompt.M": m})
        s0 = _stage0_for(run, cfg_m, ds, init, pool)
        report, manifest = _recipe(run, f"M{m}", "two-stage", cfg_m, ds, s0)
        rows.append({"M": m, "mAP": report.mAP, "R1": report.rank(1), "manifest": str(manifest)})
    write_atomic(run.path / "table.json", json.dumps(rows, indent=2) + "\n")
    run.finish(rows=rows)
    _print_table(["M", "mAP", "R1"], [[r["M"], r["mAP"], r["R1"]] for r in rows])
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .training.pipeline import preset_rows
    init = _init_or_none(args)
    cfg = _resolve_config(args, init.config if init else None)
    rows_def = preset_rows(args.preset, cfg)
    ds = _load_dataset(args.data)
    run = Run(_run_path(args, f"ablate-{args.preset}", cfg, args.data, args.init),
              f"ablate {args.preset}", cfg)
    pool, rows = {}, []
    for i, (label, recipe, overrides, columns) in enumerate(rows_def):
        cfg_r = cfg.updated(**overrides)
        s0 = _stage0_for(run, cfg_r, ds, init, pool)
        report, manifest = _recipe(run, f"row{i}", recipe, cfg_r, ds, s0)
        rows.append({"row": label, **columns, "mAP": report.mAP, "R1": report.rank(1),
                     "manifest": str(manifest)})
    write_atomic(run.path / "table.json", json.dumps(rows, indent=2) + "\n")
    run.finish(preset=args.preset, rows=rows)
    cols = ["row"] + list(rows_def[0][3]) + ["mAP", "R1"]
    _print_table(cols, [[r[c] for c in cols] for r in rows])
    return EXIT_OK


def _fresh_output(path) -> Path:
    out = Path(path)
    if out.exists():
        raise FileExistsError(f"{out} already exists")
    return out


def cmd_dump_embeddings(args) -> int:
    from .evaluation import dump_embeddings
    ckpt = _load_checkpoint(args.run)
    cfg = _resolve_config(args, ckpt.config)
    ds = _load_dataset(args.data)
    out = _fresh_output(args.out)
    model = ckpt.build_model(cfg)
    dump_embeddings(model, ds, args.split, out, mode=args.mode, text_features=ckpt.text_cache,
                    batch=cfg["eval.batch"])
    print(f"wrote {out}")
    return EXIT_OK


def cmd_dump_rankings(args) -> int:
    from .evaluation import dump_rankings
    ckpt = _load_checkpoint(args.run)
    _eval_overrides(args)
    cfg = _resolve_config(args, ckpt.config)
    ds = _load_dataset(args.data)
    out = _fresh_output(args.out)
    _, dist = _evaluate(ckpt, cfg, ds)
    q, g = ds.split("query"), ds.split("gallery")
    dump_rankings(dist, q.paths, g.paths, q.pids, g.pids, q.camids, g.camids, args.top_k, out)
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _config_options(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
    p.add_argument("--deterministic", action="store_true", help="deterministic kernels, one thread")


def _run_dir_option(p):
    p.add_argument("--run-dir", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<command>-<hash>)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clipreid", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic multi-camera dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--ids", type=int, default=20, help="training identities")
    p.add_argument("--test-ids", type=int, default=None, help="test identities (default: --ids)")
    p.add_argument("--cams", type=int, default=4)
    p.add_argument("--per-id", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hw", type=int, default=32, help="image height and width")
    p.add_argument("--kind", choices=("person", "vehicle"), default="person")
    p.add_argument("--pretrain-ids", type=int, default=200,
                   help="extra captioned identities used only by stage 0")
    p.add_argument("--nuisance", type=float, default=1.0, help="scale of all nuisance strengths")
    p.add_argument("--ctx-len", type=int, default=16)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    from .training.pipeline import STAGES
    p.add_argument("--stage", choices=STAGES, required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--init", help="run directory or checkpoint of the prerequisite stage")
    _config_options(p)
    _run_dir_option(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on query/gallery")
    p.add_argument("--run", required=True, help="run directory or checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--feature-mode", help="e.g. img+post, post, pre+img+post")
    p.add_argument("--metric", choices=("cosine", "euclidean"))
    _config_options(p)
    _run_dir_option(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-m", help="two-stage training for each prompt length M")
    p.add_argument("--data", required=True)
    p.add_argument("--m", default="1,2,4,8", help="comma-separated M values")
    p.add_argument("--init", help="stage-0 run to reuse")
    _config_options(p)
    _run_dir_option(p)
    p.set_defaults(func=cmd_sweep_m)

    from .training.pipeline import PRESETS
    p = sub.add_parser("ablate", help="run an ablation preset")
    p.add_argument("preset", choices=PRESETS)
    p.add_argument("--data", required=True)
    p.add_argument("--init", help="stage-0 run to reuse where the architecture matches")
    _config_options(p)
    _run_dir_option(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-embeddings", help="CSV of image (and text) embeddings")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="gallery", choices=("train", "query", "gallery"))
    p.add_argument("--mode", default="post")
    p.add_argument("--out", required=True)
    _config_options(p)
    p.set_defaults(func=cmd_dump_embeddings)

    p = sub.add_parser("dump-rankings", help="JSON lines of top-k gallery matches per query")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--feature-mode")
    p.add_argument("--metric", choices=("cosine", "euclidean"))
    p.add_argument("--out", required=True)
    _config_options(p)
    p.set_defaults(func=cmd_dump_rankings)
    return parser


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, MissingDependencyError):
        return EXIT_MISSING
    if isinstance(exc, (TrainingError, NumericalError)):
        return EXIT_TRAINING
    return EXIT_IO


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CLIPReIDError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
