"""Command-line entry point orchestrating the full pipeline.

Subcommands: synth-data, qc, train, eval, probe, generate, ablate, report.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
All numeric work is delegated to the library modules; this file only wires
configs, directories, and files together.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path


def _setup_threads() -> None:
    """Cap worker threads before numpy loads; MEDITOK_THREADS wins."""
    n = os.environ.get("MEDITOK_THREADS")
    if n is None:
        return
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, n)


class ConfigError(Exception):
    """Bad config file or override; a usage error (exit 1)."""


CONFIG_SECTIONS = ("data", "train", "ar", "probe", "qc", "eval")


def load_run_config(path=None, overrides=()) -> dict:
    cfg: dict = {}
    if path is not None:
        try:
            import tomllib  # py >= 3.11
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            with open(path, "rb") as fh:
                cfg = tomllib.load(fh)
        except Exception as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from None
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for item in overrides:
        key, _, raw = item.partition("=")
        if not raw:
            raise ConfigError(f"--set needs key.path=value, got {item!r}")
        parts = key.split(".")
        if parts[0] not in CONFIG_SECTIONS:
            raise ConfigError(f"unknown config section {parts[0]!r} in {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{key!r} overrides a scalar with a table")
        node[parts[-1]] = value
    return cfg


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return json.dumps(str(v))


def dump_toml(d: dict, prefix: str = "") -> str:
    lines, tables = [], []
    for k in sorted(d):
        v = d[k]
        if isinstance(v, dict):
            tables.append((k, v))
        elif v is not None:
            lines.append(f"{k} = {_toml_value(v)}")
    out = "\n".join(lines)
    for k, v in tables:
        name = f"{prefix}{k}"
        out += f"\n\n[{name}]\n" + dump_toml(v, prefix=name + ".")
    return out.strip() + "\n"


def make_run_dir(root: Path, label: str) -> Path:
    """Append-only run directories: never reuse an existing one."""
    root.mkdir(parents=True, exist_ok=True)
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{label}-{stamp}"
    candidate, k = base, 1
    while candidate.exists():
        k += 1
        candidate = Path(f"{base}-{k}")
    candidate.mkdir()
    return candidate


def write_lock(run_dir: Path, sections: dict) -> None:
    (run_dir / "config.lock").write_text(dump_toml(sections))


def _registry_update(root: Path, stage: str, ckpt_path: Path) -> None:
    reg_path = root / "latest.json"
    reg = json.loads(reg_path.read_text()) if reg_path.exists() else {}
    reg[stage] = str(ckpt_path)
    reg_path.write_text(json.dumps(reg, indent=2, sort_keys=True))


def _registry_lookup(root: Path, stage: str) -> Path:
    reg_path = root / "latest.json"
    if not reg_path.exists():
        raise ConfigError(f"--resume without a path needs {reg_path}, which does not exist")
    reg = json.loads(reg_path.read_text())
    source = {"s2": "s1"}.get(stage, stage)
    if source not in reg:
        raise ConfigError(f"no {source!r} checkpoint recorded in {reg_path}")
    return Path(reg[source])


# -- subcommands --------------------------------------------------------------

def cmd_synth_data(args) -> int:
    from .datagen import DatasetConfig, render_dataset

    cfg = load_run_config(args.config, args.set or ())
    section = dict(cfg.get("data", {}))
    for key, val in (("n_images", args.n), ("n_classes", args.classes), ("seed", args.seed),
                     ("modality", args.modality), ("image_size", args.size)):
        if val is not None:
            section[key] = val
    if args.no_captions:
        section["captions"] = False
    try:
        dcfg = DatasetConfig(**section)
    except TypeError as exc:
        raise ConfigError(f"bad [data] config: {exc}") from None
    out = Path(args.out)
    if (out / "manifest.jsonl").exists():
        print(f"error: {out} already holds a dataset (dirs are append-only); "
              f"choose a fresh directory", file=sys.stderr)
        return 2
    manifest = render_dataset(dcfg, out)
    write_lock(out, {"data": section})
    print(f"wrote {len(manifest.records)} records to {out / 'manifest.jsonl'}")
    return 0


def cmd_qc(args) -> int:
    from .datagen import Manifest
    from .medprep import qc_filter_records

    manifest = Manifest.load(args.manifest)
    root = Path(args.manifest).parent
    kept, audit = qc_filter_records(manifest.records, root, require_tag=args.require_tag)
    Manifest(kept).save(args.out)
    with open(args.audit, "w", encoding="utf-8") as fh:
        for row in audit:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"kept {len(kept)}/{len(manifest.records)} records; audit at {args.audit}")
    return 0


def _train_config(cfg_sections: dict, stage: str, seed) -> "TrainConfig":
    from .train import TrainConfig

    section = dict(cfg_sections.get("train", {}))
    section["stage"] = stage
    if seed is not None:
        section["seed"] = seed
    try:
        return TrainConfig.from_dict(section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [train] config: {exc}") from None


def _load_or_build_semantic(root: Path, cfg, data):
    from .train import build_semantic, load_semantic, save_semantic

    sem_path = root / "semantic.mtck"
    if sem_path.exists():
        return load_semantic(sem_path)
    sem = build_semantic(cfg, data)
    save_semantic(sem, sem_path)
    return sem


def cmd_train(args) -> int:
    from .datagen import Manifest
    from .train import StageData, load_checkpoint, train_stage

    stage = args.stage.replace("-", "_")
    sections = load_run_config(args.config, args.set or ())
    cfg = _train_config(sections, stage, args.seed)
    manifest = Manifest.load(args.data)
    root = Path(args.data).parent
    out_root = Path(args.out)

    init = None
    if args.resume is not None:
        ckpt_path = Path(args.resume) if args.resume != "" else _registry_lookup(out_root, stage)
        init = load_checkpoint(ckpt_path)

    run_dir = make_run_dir(out_root, f"train-{args.stage}")
    sections.setdefault("train", {})
    write_lock(run_dir, {**sections, "train": cfg.to_dict()})

    data = StageData(manifest, root)
    semantic = _load_or_build_semantic(out_root, cfg, data)
    ckpt, rows = train_stage(cfg, manifest, root, init=init, semantic=semantic,
                             out_dir=run_dir)
    _registry_update(out_root, stage, run_dir / "checkpoint.mtck")
    print(f"stage {args.stage}: {len(rows)} steps, final total loss "
          f"{rows[-1]['total']:.4f}; checkpoint at {run_dir / 'checkpoint.mtck'}")
    return 0


def _find_semantic(ckpt_path: Path, explicit):
    from .train import load_semantic

    if explicit:
        return load_semantic(explicit)
    for candidate in (ckpt_path.parent / "semantic.mtck",
                      ckpt_path.parent.parent / "semantic.mtck"):
        if candidate.exists():
            return load_semantic(candidate)
    raise ConfigError(f"no semantic.mtck found near {ckpt_path}; pass --semantic")


def cmd_eval(args) -> int:
    from .datagen import Manifest
    from .evalkit import (checkpoint_file_hash, emit_report, reconstruction_metrics,
                          reconstruct_images, canonical_images)
    from .train import StageData, load_checkpoint, load_model_from_checkpoint

    ckpt_path = Path(args.ckpt)
    ckpt = load_checkpoint(ckpt_path)
    manifest = Manifest.load(args.data)
    root = Path(args.data).parent
    semantic = _find_semantic(ckpt_path, args.semantic)
    run_dir = make_run_dir(Path(args.out), "eval")
    metrics = reconstruction_metrics(ckpt, manifest, root, semantic)
    gallery = None
    if args.gallery:
        _, model = load_model_from_checkpoint(ckpt)
        data = StageData(manifest, root, split="test")
        images = canonical_images(data)[: args.gallery]
        recons = reconstruct_images(model, images)
        gallery = list(zip(images, recons))
    paths = emit_report({"test": metrics}, run_dir, ckpt.config_hash,
                        checkpoint_file_hash(ckpt_path), gallery=gallery)
    write_lock(run_dir, {"eval": {"ckpt": str(ckpt_path), "data": str(args.data)}})
    print(json.dumps(metrics, sort_keys=True))
    print(f"report at {paths['json']}")
    return 0


def cmd_probe(args) -> int:
    from .datagen import Manifest
    from .evalkit import ProbeConfig, linear_probe
    from .train import load_checkpoint

    sections = load_run_config(args.config, args.set or ())
    section = dict(sections.get("probe", {}))
    if args.eval_on:
        section["eval_on"] = args.eval_on
    try:
        pcfg = ProbeConfig(**section)
    except TypeError as exc:
        raise ConfigError(f"bad [probe] config: {exc}") from None
    ckpt = load_checkpoint(args.ckpt)
    manifest = Manifest.load(args.data)
    root = Path(args.data).parent
    result = linear_probe(ckpt, manifest, manifest, root, pcfg)
    run_dir = make_run_dir(Path(args.out), "probe")
    payload = {"map": result.map, "auc": result.auc, "accuracy": result.accuracy,
               "epochs": result.epochs, "notes": result.notes}
    (run_dir / "probe.json").write_text(json.dumps(payload, sort_keys=True, indent=2))
    write_lock(run_dir, {"probe": section})
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_generate(args) -> int:
    import numpy as np

    from .argen import ARConfig, ARModel, flatten_tokens, sample_batch, train_ar, unflatten_tokens
    from .datagen import Manifest, write_pgm
    from .evalkit import canonical_images
    from . import ndgrad as ng
    from .train import (Checkpoint, StageData, load_checkpoint, load_model_from_checkpoint,
                        save_checkpoint)
    from . import vq as vqmod

    sections = load_run_config(args.config, args.set or ())
    ar_section = dict(sections.get("ar", {}))
    tok_ckpt = load_checkpoint(args.ckpt)
    tok_cfg, model = load_model_from_checkpoint(tok_ckpt)
    manifest = Manifest.load(args.data)
    root = Path(args.data).parent
    run_dir = make_run_dir(Path(args.out), "generate")

    data = StageData(manifest, root)
    n_classes = int(data.labels.max()) + 1
    grid_h = grid_w = tok_cfg.image_size // tok_cfg.encoder.downsample_factor
    train_keys = {"steps", "batch_size", "lr", "weight_decay"}
    arch = {k: v for k, v in ar_section.items() if k not in train_keys}
    try:
        ar_cfg = ARConfig(grid_h=grid_h, grid_w=grid_w, n_codebooks=tok_cfg.n_codebooks,
                          codebook_size=tok_cfg.codebook_size, n_classes=n_classes, **arch)
    except TypeError as exc:
        raise ConfigError(f"bad [ar] config: {exc}") from None

    if args.ar_ckpt:
        ar_ckpt = load_checkpoint(args.ar_ckpt)
        ar_model = ARModel(ar_cfg, seed=0)
        for name, t in ar_model.params.items():
            t.data = ar_ckpt.params[name].copy()
    else:
        images = canonical_images(data)
        seqs = []
        for start in range(0, len(images), 64):
            x = ng.tensor(images[start:start + 64])
            quant = vqmod.quantize(model.encoder.encode(x), model.codebook)
            for row, cls in zip(range(quant.tokens.indices.shape[0]),
                                data.labels[start:start + 64]):
                grid = vqmod.TokenGrid(grid_h, grid_w, tok_cfg.codebook_size,
                                       quant.tokens.indices[row])
                seqs.append(flatten_tokens(grid, int(cls), ar_cfg).ids)
        ar_model, losses = train_ar(ar_cfg, np.stack(seqs),
                                    steps=int(ar_section.get("steps", 600)),
                                    batch_size=int(ar_section.get("batch_size", 16)),
                                    seed=args.seed,
                                    lr=float(ar_section.get("lr", 1e-4)),
                                    weight_decay=float(ar_section.get("weight_decay", 0.05)))
        ar_path = run_dir / "ar-checkpoint.mtck"
        save_checkpoint(Checkpoint(params={k: t.data.copy() for k, t in ar_model.params.items()},
                                   moments={}, opt_steps={"ar": len(losses)}, step=len(losses),
                                   stage="ar", stage_start=0, rng_state={},
                                   config=tok_ckpt.config, config_hash=tok_ckpt.config_hash,
                                   semantic_hash=tok_ckpt.semantic_hash, kind="ar"), ar_path)
        print(f"trained AR model ({len(losses)} steps, final loss {losses[-1]:.3f}); "
              f"saved {ar_path}")

    class_ids = ([args.class_id] * args.n if args.class_id is not None
                 else [i % n_classes for i in range(args.n)])
    seqs = sample_batch(ar_model, class_ids, temperature=args.temperature, seed=args.seed)
    sidecar = []
    for i, seq in enumerate(seqs):
        grid = unflatten_tokens(seq)
        latents = vqmod.lookup(grid, model.codebook)
        img = model.decoder.decode(ng.reshape(latents, (1,) + latents.shape)).data[0]
        u8 = np.round((np.clip(img[:, :, 0], -1, 1) + 1) / 2 * 255).astype(np.uint8)
        name = f"sample_{i:04d}.pgm"
        write_pgm(run_dir / name, u8)
        sidecar.append({"path": name, "class_id": seq.class_id,
                        "seed": args.seed, "draw": i, "temperature": args.temperature})
    (run_dir / "samples.json").write_text(json.dumps(sidecar, indent=2))
    write_lock(run_dir, {"ar": ar_section})
    print(f"wrote {len(seqs)} samples to {run_dir}")
    return 0


ABLATION_ROWS = ("s1_only", "s2_only", "s1_s2", "combined", "cosine_align")


def cmd_ablate(args) -> int:
    import csv as csvmod
    from dataclasses import replace

    from .datagen import Manifest
    from .evalkit import ProbeConfig, linear_probe, reconstruction_metrics
    from .train import StageData, train_stage

    sections = load_run_config(args.config, args.set or ())
    manifest = Manifest.load(args.data)
    root = Path(args.data).parent
    run_dir = make_run_dir(Path(args.out), "ablate")

    base = _train_config(sections, "s1", args.seed)
    budget = base.steps_s1 + base.steps_s2
    data = StageData(manifest, root)
    semantic = _load_or_build_semantic(run_dir, base, data)
    pcfg = ProbeConfig(**sections.get("probe", {}))

    rows = []
    for name in ABLATION_ROWS:
        if name == "s1_only":
            cfg = replace(base, stage="s1", steps_s1=budget)
            ckpt, _ = train_stage(cfg, manifest, root, semantic=semantic)
        elif name == "s2_only":
            cfg = replace(base, stage="s2_only")
            ckpt, _ = train_stage(cfg, manifest, root, semantic=semantic)
        elif name == "s1_s2":
            cfg1 = replace(base, stage="s1")
            mid, _ = train_stage(cfg1, manifest, root, semantic=semantic)
            cfg2 = replace(base, stage="s2")
            ckpt, _ = train_stage(cfg2, manifest, root, init=mid, semantic=semantic)
        elif name == "combined":
            cfg = replace(base, stage="combined")
            ckpt, _ = train_stage(cfg, manifest, root, semantic=semantic)
        else:  # cosine_align: stage-1 objective with the cosine variant
            cfg = replace(base, stage="s1", steps_s1=budget,
                          weights=replace(base.weights, align_kind="cosine"))
            ckpt, _ = train_stage(cfg, manifest, root, semantic=semantic)
        rec = reconstruction_metrics(ckpt, manifest, root, semantic)
        probe = linear_probe(ckpt, manifest, manifest, root, pcfg)
        rows.append({"config": name, "psnr": rec["psnr"], "ssim": rec["ssim"],
                     "map": probe.map, "auc": probe.auc, "accuracy": probe.accuracy})
        print(f"{name}: psnr {rec['psnr']:.2f}  ssim {rec['ssim']:.4f}  "
              f"map {probe.map:.3f}  auc {probe.auc:.3f}")

    table = run_dir / "ablation.csv"
    with open(table, "w", newline="") as fh:
        writer = csvmod.DictWriter(fh, fieldnames=["config", "psnr", "ssim", "map", "auc", "accuracy"])
        writer.writeheader()
        writer.writerows(rows)
    write_lock(run_dir, sections or {"train": base.to_dict()})
    print(f"ablation table at {table}")
    return 0


def cmd_report(args) -> int:
    root = Path(args.run)
    found = {}
    for path in sorted(root.rglob("*.json")):
        if path.name in ("metrics.json", "probe.json", "samples.json"):
            found[str(path.relative_to(root))] = json.loads(path.read_text())
    for path in sorted(root.rglob("ablation.csv")):
        found[str(path.relative_to(root))] = path.read_text()
    if not found:
        print(f"error: nothing to report under {root}", file=sys.stderr)
        return 2
    out = root / "report.json"
    out.write_text(json.dumps(found, sort_keys=True, indent=2))
    print(f"aggregated {len(found)} artifacts into {out}")
    return 0


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meditok",
                                     description="Two-stage unified image tokenizer pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="TOML run config")
        p.add_argument("--set", action="append", metavar="KEY.PATH=VALUE",
                       help="override any config field")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("synth-data", help="render a synthetic phantom dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--modality", default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--no-captions", action="store_true")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("qc", help="quality-control filter a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--audit", required=True)
    p.add_argument("--require-tag", default=None)
    p.set_defaults(func=cmd_qc)

    p = sub.add_parser("train", help="train a tokenizer stage")
    common(p)
    p.add_argument("--data", required=True, help="manifest path")
    p.add_argument("--stage", required=True, choices=["s1", "s2", "combined", "s2-only"])
    p.add_argument("--out", required=True, help="runs root directory")
    p.add_argument("--resume", nargs="?", const="", default=None,
                   help="checkpoint path, or bare to use the latest recorded one")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="reconstruction metrics for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--semantic", default=None)
    p.add_argument("--gallery", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="linear-probe a frozen checkpoint")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-on", choices=["images", "reconstructions"], default=None)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("generate", help="class-conditional sampling through the tokenizer")
    common(p)
    p.add_argument("--ckpt", required=True, help="tokenizer checkpoint")
    p.add_argument("--ar-ckpt", default=None, help="reuse a trained AR checkpoint")
    p.add_argument("--data", required=True, help="manifest for token sequences/classes")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--class-id", type=int, default=None)
    p.add_argument("--temperature", type=float, default=1.0)
    p.set_defaults(func=cmd_generate, seed=0)

    p = sub.add_parser("ablate", help="run the staged-training ablation grid")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="aggregate run artifacts")
    p.add_argument("--run", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    _setup_threads()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1

    from .train import CheckpointError, DataError, DivergenceError

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return 3
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
