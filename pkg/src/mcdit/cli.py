"""Command-line entry point.

Subcommands: gen-data, train, sample, eval, count-ops, attn-map. Commands
exit 0 on success and nonzero with a one-line ``error: <kind>: <message>``
otherwise. Set MCDIT_VERBOSE=1 for progress logging on stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import data as toydata
from .attention import MODE_CMMDIT, MODE_MMDIT, PRESETS, BranchLayout, count_attn_ops
from .checkpoint import load_run, save_run
from .config import load_config
from .errors import (
    CheckpointError,
    ConfigurationError,
    ContractError,
    DimensionError,
    NumericError,
)
from .flow import (
    MODE_TRAINING_BASED,
    MODE_TRAINING_FREE,
    Adam,
    TrainPlan,
    TrainStage,
    eval_rf_loss,
    sample_euler,
    select_trainable,
    train,
)
from .lora import ConditionType, LoraRegistry, switch_select
from .metrics import (
    MetricReport,
    config_hash,
    depth_mse,
    edge_f1,
    pixel_mask_to_grid,
    ssim,
    xattn_map,
)
from .model import Model, make_adapter

_ERRORS = (ConfigurationError, ContractError, DimensionError, NumericError,
           CheckpointError, OSError, ValueError)


def _verbose() -> bool:
    return os.environ.get("MCDIT_VERBOSE", "0") not in ("0", "", "false")


def _log(msg: str) -> None:
    if _verbose():
        print(msg, file=sys.stderr)


def parse_stage(text: str) -> tuple[TrainStage, ConditionType | None]:
    if text == "base":
        return TrainStage.BASE, None
    if text.startswith("condition-lora:"):
        return TrainStage.CONDITION_LORA, ConditionType.parse(text.split(":", 1)[1])
    if text == "denoising-lora":
        return TrainStage.DENOISING_LORA, None
    raise ConfigurationError(
        f"unknown stage {text!r}; expected base, condition-lora:<TYPE>, or denoising-lora"
    )


# -- subcommands -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    try:
        manifest = toydata.write_dataset(out, args.count, args.seed)
    except OSError as exc:
        raise OSError(f"cannot write dataset under {out}: {exc}") from exc
    records = toydata.read_manifest(manifest)
    splits = {s: 0 for s in ("train", "test", "discard")}
    for r in records:
        splits[r["split"]] += 1
    print(f"wrote {len(records)} samples to {manifest} "
          f"(train={splits['train']} test={splits['test']} discard={splits['discard']})")
    return 0


def cmd_count_ops(args) -> int:
    if args.preset:
        if args.preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {args.preset!r}; have {list(PRESETS)}")
        layout, blocks = PRESETS[args.preset]
    else:
        lens = tuple(int(x) for x in args.c.split(",") if x.strip()) if args.c else ()
        layout = BranchLayout(args.t, args.x, lens)
        blocks = args.blocks
    n = count_attn_ops(layout, blocks, args.mode)
    print(f"{n} ({n / 1e6:.2f}M)")
    return 0


def _load_train_split(data_dir: Path, split: str, limit: int | None = None) -> list:
    manifest = Path(data_dir) / "manifest.jsonl"
    if not manifest.exists():
        raise ConfigurationError(f"no manifest at {manifest}; run gen-data first")
    records = [r for r in toydata.read_manifest(manifest) if r["split"] == split]
    if limit:
        records = records[:limit]
    return records


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set or [])
    stage_text = args.stage or cfg.train.stage
    stage, cond_type = parse_stage(stage_text)
    data_dir = Path(args.data or cfg.data.dir)
    records = _load_train_split(data_dir, "train")
    if not records:
        raise ConfigurationError(f"no training samples in {data_dir}")
    dataset = [toydata.record_to_train_example(data_dir, r) for r in records]

    ts = cfg.train
    start_step = 0
    optimizer = None
    if args.resume:
        model, registry, meta, optim_state = load_run(args.resume)
        start_step = int(meta.get("step", 0))
        if meta.get("stage") != stage_text:
            raise ConfigurationError(
                f"resume stage mismatch: checkpoint has {meta.get('stage')!r}, asked {stage_text!r}"
            )
    elif args.init:
        model, registry, meta, optim_state = load_run(args.init)
        optim_state = {}
    else:
        model = Model(cfg.model, np.random.default_rng(ts.seed))
        registry = LoraRegistry()
        optim_state = {}

    cond_names = tuple(ConditionType.parse(c) for c in ts.conditions)
    if stage == TrainStage.CONDITION_LORA:
        if cond_type not in registry.condition_adapters:
            registry.register(cond_type, make_adapter(
                model.config, rank=ts.lora_rank, alpha=ts.lora_alpha,
                rng=np.random.default_rng(ts.seed + 1)))
    elif stage == TrainStage.DENOISING_LORA:
        missing = [ct.name for ct in cond_names if ct not in registry.condition_adapters]
        if missing:
            raise ConfigurationError(
                f"denoising-lora stage needs pretrained condition adapters; missing: {missing}"
            )
        if ts.train_text_adapter:
            if registry.text_adapter is None:
                registry.text_adapter = make_adapter(
                    model.config, rank=ts.lora_rank, alpha=ts.lora_alpha,
                    rng=np.random.default_rng(ts.seed + 2), text_branch=True)
        elif registry.denoising_adapter is None:
            registry.denoising_adapter = make_adapter(
                model.config, rank=ts.lora_rank, alpha=ts.lora_alpha,
                rng=np.random.default_rng(ts.seed + 2))

    plan = TrainPlan(
        stage=stage, steps=ts.steps, batch_size=ts.batch_size,
        learning_rate=ts.learning_rate, weight_decay=ts.weight_decay,
        seed=ts.seed, log_every=ts.log_every, lr_schedule=ts.lr_schedule,
        cond_type=cond_type, condition_types=cond_names,
        train_text_adapter=ts.train_text_adapter,
    )
    trainable = select_trainable(model, registry, plan)
    n_train = sum(t.size for t in trainable.values())
    print(f"trainable parameters: {n_train}")

    if args.resume and optim_state:
        optimizer = Adam(trainable, lr=ts.learning_rate, weight_decay=ts.weight_decay)
        optimizer.load_state(optim_state, start_step)

    curve, opt = train(model, plan, dataset, registry,
                       optimizer=optimizer, start_step=start_step)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"stage": stage_text, "step": plan.steps, "seed": ts.seed}
    save_run(out, model, registry, meta=meta, optim_state=opt.state())

    curve_path = out.with_suffix(out.suffix + ".loss.csv")
    write_mode = "a" if args.resume and curve_path.exists() else "w"
    with open(curve_path, write_mode) as fh:
        if write_mode == "w":
            fh.write("step,loss\n")
        for step, loss in curve:
            fh.write(f"{step},{loss:.8f}\n")
    print(f"saved checkpoint to {out} (loss curve: {curve_path})")
    return 0


def _parse_condition_args(pairs: list[str]):
    conds = []
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigurationError(f"--condition wants TYPE=path, got {pair!r}")
        name, path = pair.split("=", 1)
        ct = ConditionType.parse(name)
        arr = toydata.load_image(Path(path))
        conds.append((ct, toydata.cond_array_to_model_input(ct, arr)))
    return conds


def cmd_sample(args) -> int:
    model, registry, meta, _ = load_run(args.ckpt)
    conds = _parse_condition_args(args.condition)
    if args.prompts_file:
        prompts = [ln.strip() for ln in Path(args.prompts_file).read_text().splitlines()
                   if ln.strip()]
    else:
        prompts = [args.prompt]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for ct, _arr in conds:
        switch_select(ct, registry)  # fail fast if an adapter is missing
    for i, prompt in enumerate(prompts):
        ids = toydata.encode_caption(prompt.split())
        img = sample_euler(model, ids, conds, steps=args.steps, seed=args.seed + i,
                           mode=args.mode, registry=registry)
        path = out_dir / f"sample_{i:03d}_seed{args.seed + i}_{args.mode}.png"
        toydata.save_image(path, (img + 1.0) / 2.0)
        print(path)
    return 0


def cmd_eval(args) -> int:
    model, registry, meta, _ = load_run(args.ckpt)
    cfg = load_config(args.config, args.set or []) if args.config else load_config(None)
    cond_names = (tuple(args.conditions.split(",")) if args.conditions
                  else cfg.sampling.conditions) or ("canny", "depth")
    cond_types = [ConditionType.parse(c) for c in cond_names]
    data_dir = Path(args.data)
    records = _load_train_split(data_dir, args.split, args.limit)

    per_sample = []
    for i, rec in enumerate(records):
        arrays = toydata.load_sample_arrays(data_dir, rec)
        conds = [(ct, toydata.to_model_input(ct, _pseudo_sample(rec, arrays)))
                 for ct in cond_types]
        ids = np.array(rec["caption_ids"], dtype=np.int64)
        img = sample_euler(model, ids, conds, steps=args.steps, seed=args.seed + i,
                           mode=args.mode, registry=registry)
        gen01 = (img + 1.0) / 2.0
        per_sample.append({
            "seed": rec["seed"],
            "f1": edge_f1(toydata.edge_map(gen01), arrays["conditions"][ConditionType.CANNY]),
            "mse": depth_mse(toydata.extract_depth(gen01), arrays["conditions"][ConditionType.DEPTH]),
            "ssim": ssim(gen01, arrays["target"]),
        })
        _log(f"eval {i + 1}/{len(records)}")

    report = MetricReport(per_sample, config_hash({"mode": args.mode, "steps": args.steps,
                                                   "conditions": list(cond_names)}))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.jsonl").write_text(report.to_jsonl())
    (out_dir / "summary.txt").write_text(report.summary_table() + "\n")
    print(report.summary_table())
    return 0


def _pseudo_sample(rec: dict, arrays: dict) -> toydata.ToySample:
    return toydata.ToySample(
        seed=rec["seed"], scene=None, target=arrays["target"],
        conditions=arrays["conditions"],
        caption_ids=np.array(rec["caption_ids"], dtype=np.int64),
        caption=rec["caption"], scores=tuple(rec["scores"]),
        split=toydata.Split(rec["split"]),
    )


def cmd_attn_map(args) -> int:
    model, registry, meta, _ = load_run(args.ckpt)
    sample = toydata.gen_scene(args.sample_seed)
    target = ConditionType.parse(args.target)
    cond_types = [ConditionType.parse(c) for c in args.conditions.split(",")]
    conds = [(ct, toydata.to_model_input(ct, sample)) for ct in cond_types]
    rng = np.random.default_rng(args.seed)
    x_t = rng.standard_normal((model.config.image_size,) * 2 + (3,))
    region = toydata.hole_mask(sample) if args.region == "hole" else None
    use_denoise = args.mode == MODE_TRAINING_BASED
    trace = xattn_map(model, x_t, args.t, sample.caption_ids, conds, target,
                      registry=registry, use_denoise_adapter=use_denoise,
                      region_mask=region)
    conc = trace.concentration(
        pixel_mask_to_grid(toydata.subject_image_mask(sample.scene),
                           model.config.patch_size))
    heat = trace.heat / max(trace.heat.max(), 1e-12)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    toydata.save_image(out, np.repeat(np.repeat(heat, 8, 0), 8, 1))
    print(f"total_mass={trace.total_mass():.6f} subject_concentration={conc:.6f} -> {out}")
    return 0


# -- entry -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mcdit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the toy dataset")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    c = sub.add_parser("count-ops", help="attention op counts for a layout")
    c.add_argument("--t", type=int, default=512)
    c.add_argument("--x", type=int, default=1024)
    c.add_argument("--c", default="")
    c.add_argument("--blocks", type=int, default=1)
    c.add_argument("--mode", choices=[MODE_MMDIT, MODE_CMMDIT], default=MODE_CMMDIT)
    c.add_argument("--preset", default=None)
    c.set_defaults(fn=cmd_count_ops)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config", default=None)
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    t.add_argument("--stage", default=None,
                   help="base | condition-lora:<TYPE> | denoising-lora")
    t.add_argument("--data", default=None)
    t.add_argument("--out", required=True)
    t.add_argument("--init", default=None, help="checkpoint providing base/adapters")
    t.add_argument("--resume", default=None)
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="generate images from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--prompt", default="a red circle at top-left")
    s.add_argument("--prompts-file", default=None)
    s.add_argument("--condition", action="append", metavar="TYPE=IMAGE.PNG")
    s.add_argument("--mode", choices=[MODE_TRAINING_FREE, MODE_TRAINING_BASED],
                   default=MODE_TRAINING_FREE)
    s.add_argument("--steps", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("eval", help="metrics over a dataset split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--config", default=None)
    e.add_argument("--set", action="append")
    e.add_argument("--conditions", default=None, help="comma list, e.g. canny,depth")
    e.add_argument("--mode", choices=[MODE_TRAINING_FREE, MODE_TRAINING_BASED],
                   default=MODE_TRAINING_FREE)
    e.add_argument("--steps", type=int, default=16)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--limit", type=int, default=None)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("attn-map", help="denoising-to-branch attention heat map")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--sample-seed", type=int, default=0)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--t", type=float, default=0.5)
    a.add_argument("--target", default="subject")
    a.add_argument("--conditions", default="subject,mask_fill")
    a.add_argument("--region", choices=["hole", "all"], default="hole")
    a.add_argument("--mode", choices=[MODE_TRAINING_FREE, MODE_TRAINING_BASED],
                   default=MODE_TRAINING_FREE)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_attn_map)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
