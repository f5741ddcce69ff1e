"""Command-line interface.

Subcommands: gen-data, train, plan, render, edit, eval, check. Every command
accepts --config / --seed / --out; outputs under a fixed seed are byte-stable.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import harness, tensorio
from .checkpoint import Checkpoint
from .config import Config, ConfigError, load_config
from .numerics import Rng
from .sequence import VISUAL_TARGET
from .toydata import Dataset, EditCase, generate_dataset


def _common(sub):
    sub.add_argument("--config", type=str, default=None, help="config file (defaults built in)")
    sub.add_argument("--seed", type=int, default=None, help="override run.seed")
    sub.add_argument("--out", type=str, default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="planflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate procedural datasets")
    _common(p)
    p.add_argument("--stage", default="all", choices=["I", "II", "III", "eval", "all"])

    p = sub.add_parser("train", help="train one pipeline stage")
    _common(p)
    p.add_argument("--stage", required=True, choices=["I", "II", "III"])
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--resume", action="append", default=[], help="checkpoint(s) to start from")
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--log-every", type=int, default=200)

    p = sub.add_parser("plan", help="run masked-infilling planning for one case")
    _common(p)
    p.add_argument("--case", required=True)
    p.add_argument("--ckpt", required=True)

    p = sub.add_parser("render", help="render one case from text/source conditioning")
    _common(p)
    p.add_argument("--case", required=True)
    p.add_argument("--ckpt", required=True)

    p = sub.add_parser("edit", help="plan + render end-to-end for one case")
    _common(p)
    p.add_argument("--case", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", default=None, help="validate the case against this task kind")

    p = sub.add_parser("eval", help="oracle evaluation over a dataset")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", default=None, help="omit to evaluate untrained models")
    p.add_argument("--baseline", default="model", choices=["model", "random"])
    p.add_argument("--max-cases", type=int, default=None)

    p = sub.add_parser("check", help="run the invariant suite")
    _common(p)
    return parser


def _load(args) -> tuple[Config, int]:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.set("run.seed", args.seed)
    return cfg, cfg.get_int("run.seed")


def _out_dir(args, default: str) -> Path:
    out = Path(args.out) if args.out else Path(default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_case(path: str) -> EditCase:
    """A standalone case file, or 'records.jsonl:INDEX'."""
    if ":" in path and not Path(path).exists():
        file, _, idx = path.rpartition(":")
        with open(file) as fh:
            for i, line in enumerate(fh):
                if i == int(idx):
                    return EditCase.from_dict(json.loads(line))
        raise ConfigError(f"record {idx} not found in {file}")
    with open(path) as fh:
        return EditCase.from_dict(json.load(fh))


def _bundle_from_ckpt(cfg: Config, ckpt_path: str | None):
    bundle = harness.ModelBundle(cfg)
    ema = None
    if ckpt_path:
        ck = Checkpoint.load(ckpt_path)
        bundle.load_param_values(ck.params)
        ema = ck.ema or None
    return bundle, ema


def _merge_checkpoints(paths: list[str]) -> Checkpoint | None:
    if not paths:
        return None
    merged = Checkpoint.load(paths[0])
    for path in paths[1:]:
        ck = Checkpoint.load(path)
        merged.params.update(ck.params)
        merged.ema.update(ck.ema)
        merged.stages_done = sorted(set(merged.stages_done) | set(ck.stages_done))
        merged.stage, merged.step = ck.stage, ck.step
        merged.opt_m, merged.opt_v, merged.opt_meta = ck.opt_m, ck.opt_v, ck.opt_meta
        merged.rng_states = ck.rng_states
    return merged


def cmd_gen_data(args) -> int:
    cfg, seed = _load(args)
    out = _out_dir(args, "data")
    grid = cfg.get_ints("data.grid")
    stages = ["I", "II", "III", "eval"] if args.stage == "all" else [args.stage]
    for stage in stages:
        if stage == "eval":
            counts = {"v2v": cfg.get_int("data.eval_cases")}
            fams = cfg.get_strs("data.eval_families")
            manifest = generate_dataset(out / "eval", seed + 90001, counts, grid, v2v_families=fams)
            _emit_cases(out / "eval", limit=20)
        else:
            counts = harness.dataset_counts(cfg, stage)
            manifest = generate_dataset(out / f"stage_{stage}", seed + harness.STAGES.index(stage) + 1,
                                        counts, grid, v2v_families=cfg.get_strs("data.train_families"))
        print(f"wrote {manifest['total']} records for {stage} under {out}")
    return 0


def _emit_cases(dataset_dir: Path, limit: int) -> None:
    data = Dataset(dataset_dir)
    case_dir = dataset_dir / "cases"
    case_dir.mkdir(exist_ok=True)
    n = 0
    for rec in data.records:
        if rec["kind"] != "case":
            continue
        with open(case_dir / f"case_{rec['index']:05d}.json", "w") as fh:
            json.dump(rec, fh, sort_keys=True)
        n += 1
        if n >= limit:
            break


def cmd_train(args) -> int:
    cfg, seed = _load(args)
    out = _out_dir(args, "runs")
    data = Dataset(args.data)
    run = harness.RunConfig.from_config(cfg)
    bundle = harness.ModelBundle(cfg)
    resume = _merge_checkpoints(args.resume)
    stage_cfg = harness.StageConfig.from_config(cfg, args.stage)
    every = args.checkpoint_every if args.checkpoint_every is not None else cfg.get_int("train.checkpoint_every")
    _, final = harness.run_stage(
        bundle, stage_cfg, data, run, seed,
        resume=resume, checkpoint_dir=out, checkpoint_every=every, log_every=args.log_every,
    )
    print(f"stage {args.stage} complete at step {final.step}; checkpoint in {out}")
    return 0


def cmd_plan(args) -> int:
    cfg, seed = _load(args)
    out = _out_dir(args, "plan_out")
    case = load_case(args.case)
    bundle, ema = _bundle_from_ckpt(cfg, args.ckpt)
    run = harness.RunConfig.from_config(cfg)
    from .planner import plan
    seq, _ = harness.planner_sequence(case, bundle.vit)
    t0, t1 = seq.span_of(VISUAL_TARGET)
    seq.embeddings[t0:t1] = 0.0
    seq.masked[t0:t1] = True
    with harness.ema_weights(bundle, ema or {}, enabled=ema is not None and run.use_ema):
        result = plan(bundle.planner, bundle.decoder, seq, run.plan_steps, run.decoder_steps,
                      run.g_text, run.g_image, Rng(seed).child(0xED17), run.reveal)
    tensorio.write_tensor(out / "embeddings.pft", result.embeddings)
    tensorio.write_tensor(out / "hidden.pft", result.hidden)
    report = {
        "masked_counts": result.masked_counts,
        "mean_pred_norm": [round(x, 6) for x in result.mean_pred_norm],
        "seed": seed,
    }
    (out / "plan_report.txt").write_text(
        "".join(f"{k} {v}\n" for k, v in sorted(report.items()))
    )
    print(f"plan written to {out}")
    return 0


def cmd_render(args) -> int:
    cfg, seed = _load(args)
    out = _out_dir(args, "render_out")
    case = load_case(args.case)
    bundle, ema = _bundle_from_ckpt(cfg, args.ckpt)
    run = harness.RunConfig.from_config(cfg)
    from . import guidance as guidance_mod
    from .renderer import CondInputs, render
    from .toydata import frames_to_ids

    latents, roles = harness.renderer_sources(case, bundle.vae)
    key = harness.GUIDANCE_KEY[case.task]
    spec = guidance_mod.spec_for_conditions(
        run.guidance_scales[key], has_video="vid" in roles, has_image="img" in roles,
        has_text=len(case.instruction) > 0, has_target_semantics=False,
    )
    cond = CondInputs(np.asarray(case.instruction, dtype=np.intp), None, latents, roles)
    with harness.ema_weights(bundle, ema or {}, enabled=ema is not None and run.use_ema):
        latent = render(bundle.renderer, cond, run.guidance_steps[key], spec,
                        run.flow_shift if run.timestep.shift_in_inference else 1.0,
                        Rng(seed).child(0xD1), case.target.grid)
    tensorio.write_tensor(out / "latent.pft", latent)
    tensorio.write_tensor(out / "frames.pft", frames_to_ids(bundle.vae.decode(latent)).astype(np.float64))
    print(f"render written to {out}")
    return 0


def cmd_edit(args) -> int:
    cfg, seed = _load(args)
    out = _out_dir(args, "edit_out")
    case = load_case(args.case)
    if args.task is not None and case.task.value != args.task.lower():
        raise ConfigError(f"case is {case.task.value!r}, not {args.task!r}")
    bundle, ema = _bundle_from_ckpt(cfg, args.ckpt)
    run = harness.RunConfig.from_config(cfg)
    ids, report = harness.edit_case(bundle, run, case, seed, ema)
    tensorio.write_tensor(out / "frames.pft", ids.astype(np.float64))
    (out / "report.txt").write_text("".join(f"{k} {report[k]}\n" for k in sorted(report)))
    print(f"edit written to {out}: pass={report['oracle_pass']}")
    return 0


def cmd_eval(args) -> int:
    cfg, seed = _load(args)
    out = _out_dir(args, "eval_out")
    data = Dataset(args.data)
    bundle, ema = _bundle_from_ckpt(cfg, args.ckpt)
    run = harness.RunConfig.from_config(cfg)
    report = harness.evaluate(
        bundle, data, run, seed, ema=ema,
        random_baseline=args.baseline == "random",
        max_cases=args.max_cases, with_invariants=True,
    )
    (out / "report.txt").write_text(report.to_text())
    with open(out / "report.json", "w") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
    print(report.to_text(), end="")
    print(f"(runtime {report.runtime_seconds:.1f}s; details in {out})")
    return 0


def cmd_check(args) -> int:
    _load(args)
    results = harness.invariant_suite()
    failed = 0
    for name, ok, detail in results:
        mark = "ok  " if ok else "FAIL"
        line = f"{mark} {name}"
        if detail and not ok:
            line += f": {detail}"
        print(line)
    failed = sum(1 for _, ok, _ in results if not ok)
    print(f"{len(results) - failed}/{len(results)} invariants hold")
    return 1 if failed else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "gen-data": cmd_gen_data,
        "train": cmd_train,
        "plan": cmd_plan,
        "render": cmd_render,
        "edit": cmd_edit,
        "eval": cmd_eval,
        "check": cmd_check,
    }
    try:
        return handlers[args.command](args)
    except (ConfigError, harness.StartupError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
