"""
Command-line entry point.

    isoem phantom      --out phantom.tif --size 64 --seed 1
    isoem synthesize   --input vol.tif --out pairs/ --count 200
    isoem train        --input vol.tif --out model.pt [--resume step.pt]
    isoem reconstruct  --input vol.tif --checkpoint model.pt --out iso.tif
    isoem evaluate     --input iso_gt.tif --out report/ [--checkpoint model.pt | --identity-model]

Every command accepts ``--config run.json|run.toml`` and repeated
``--set section.key=value`` overrides. Exit codes: 0 success, 2 config,
3 I/O, 4 numerical, 5 geometry, 6 sampling.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from isoem.config import RunConfig, load_config, parse_override
from isoem.errors import ConfigError, IsoEMError, VolumeIOError
from isoem.evaluate import evaluate_synthetic, write_report
from isoem.model import IdentityModel, init_model, parameter_count
from isoem.reconstruct import reconstruct, reconstruction_geometry
from isoem.synth import VALIDATION_DOMAIN, PairStream, generate_phantom_volume, write_pair_cache
from isoem.trainer import file_sha256, load_checkpoint, save_checkpoint, train
from isoem.volume_io import Volume, load_volume, normalize_intensity, save_volume

log = logging.getLogger("isoem")

EXIT_OK = 0


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON or TOML run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config field (value parsed as JSON)")
    p.add_argument("--out", help="output path (io.output)")
    p.add_argument("--seed", type=int, help="seed for the command's random process")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="isoem", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a synthetic isotropic phantom volume")
    _common(p)
    p.add_argument("--size", help="edge length, or z,y,x")
    p.add_argument("--structure-scale", type=float)
    p.add_argument("--spacing", type=float, help="isotropic spacing in nm")

    for name, text in (
        ("synthesize", "export training pairs to a cache directory"),
        ("train", "train a model on pairs synthesized from a volume"),
        ("reconstruct", "reconstruct an isotropic volume"),
        ("evaluate", "score cubic and model reconstructions against isotropic ground truth"),
    ):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--input", help="input volume (io.input)")
        p.add_argument("--spacing", help="spacing override sz,sy,sx in nm")
        p.add_argument("--workers", type=int, help="pair synthesis threads")
        if name == "synthesize":
            p.add_argument("--count", type=int)
        if name in ("train", "evaluate"):
            p.add_argument("--profile", help="model profile (tiny, default)")
            p.add_argument("--steps", type=int, help="train.total_steps")
        if name == "train":
            p.add_argument("--resume", help="checkpoint to resume from")
            p.add_argument("--metrics-log", help="JSON-lines metrics log path")
        if name in ("reconstruct", "evaluate"):
            p.add_argument("--checkpoint")
            p.add_argument("--planes", choices=("xz", "yz", "both"))
        if name == "evaluate":
            p.add_argument("--identity-model", action="store_true", help="use an identity network stub")
            p.add_argument("--save-volumes", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = dict(parse_override(o) for o in args.overrides)
    flag_map = {
        "out": "io.output",
        "input": "io.input",
        "workers": "io.workers",
        "checkpoint": "io.checkpoint",
        "resume": "io.resume",
        "metrics_log": "io.metrics_log",
        "count": "io.pair_count",
        "profile": "model.profile",
        "steps": "train.total_steps",
        "planes": "reconstruct.planes",
        "structure_scale": "phantom.structure_scale",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "identity_model", False):
        overrides["io.identity_model"] = True
    if getattr(args, "save_volumes", False):
        overrides["io.save_volumes"] = True
    if args.command == "phantom":
        if args.size is not None:
            parts = [int(s) for s in str(args.size).split(",")]
            overrides["phantom.size"] = parts * 3 if len(parts) == 1 else parts
        if args.spacing is not None:
            overrides["phantom.spacing_nm"] = args.spacing
        if args.seed is not None:
            overrides["phantom.seed"] = args.seed
    else:
        if args.spacing is not None:
            overrides["io.spacing_nm"] = [float(s) for s in args.spacing.split(",")]
        if args.seed is not None:
            overrides["train.seed"] = args.seed
            overrides["degradation.seed"] = args.seed
    return cfg.with_overrides(overrides)


def _require(value, what: str, parser: argparse.ArgumentParser):
    if value is None:
        parser.print_usage(sys.stderr)
        raise ConfigError(f"missing {what}")
    return value


def _load_input(cfg: RunConfig, parser) -> Volume:
    path = _require(cfg.io.input, "input volume (--input or io.input)", parser)
    v = load_volume(path, cfg.io.format, cfg.io.spacing_nm, cfg.io.dataset)
    if cfg.io.normalize:
        v = normalize_intensity(v, cfg.io.lo_pct, cfg.io.hi_pct)
    return v


def _provenance(cfg: RunConfig, **extra) -> dict:
    return {"run_config": cfg.to_dict(locations=False), **extra}


def cmd_phantom(cfg: RunConfig, parser) -> int:
    out = _require(cfg.io.output, "output path (--out or io.output)", parser)
    p = cfg.phantom
    v = generate_phantom_volume(p.size, p.structure_scale, p.seed, p.spacing_nm)
    v = v.replace(provenance=v.provenance + " | config=" + json.dumps(_provenance(cfg), sort_keys=True))
    save_volume(v, out, cfg.io.output_format, cfg.io.output_dtype, cfg.io.dataset)
    log.info("wrote phantom %s to %s", v.shape, out)
    return EXIT_OK


def _streams(cfg: RunConfig, v: Volume):
    train_stream = PairStream(v, cfg.sampling, cfg.degradation, workers=cfg.io.workers)
    val = None
    if cfg.train.val_every and cfg.train.val_pairs:
        val_stream = PairStream(v, cfg.sampling, cfg.degradation, length=cfg.train.val_pairs,
                                domain=VALIDATION_DOMAIN)
        val = list(val_stream)
    return train_stream, val


def cmd_synthesize(cfg: RunConfig, parser) -> int:
    out = _require(cfg.io.output, "output directory (--out or io.output)", parser)
    v = _load_input(cfg, parser)
    stream = PairStream(v, cfg.sampling, cfg.degradation, workers=cfg.io.workers)
    write_pair_cache(stream, out, cfg.io.pair_count, extra={"run_config": cfg.to_dict(locations=False)})
    return EXIT_OK


def run_training(cfg: RunConfig, v: Volume, input_hash: Optional[str] = None, checkpoint_dir=None, metrics_log=None,
                 resume=None):
    model_cfg = cfg.model_config()
    model = init_model(model_cfg, cfg.model.init_seed)
    log.info("model: %d parameters", parameter_count(model))
    stream, val = _streams(cfg, v)

    train_cfg = cfg.train_config()

    def report(rec):
        if rec["step"] % 100 == 0 or rec["step"] == train_cfg.total_steps:
            log.info("step %d loss %.5f", rec["step"], rec["loss"])

    extra = _provenance(cfg, input_sha256=input_hash, degradation=cfg.degradation.resolved(v).__dict__)
    ckpt = train(model, stream, cfg.loss, train_cfg, resume=resume, val_pairs=val,
                 checkpoint_dir=checkpoint_dir, metrics_log=metrics_log, on_step=report, extra=extra)
    return model, ckpt


def cmd_train(cfg: RunConfig, parser) -> int:
    out = Path(_require(cfg.io.output, "checkpoint path (--out or io.output)", parser))
    v = _load_input(cfg, parser)
    resume = load_checkpoint(cfg.io.resume) if cfg.io.resume else None
    if resume is not None and resume.model_config != cfg.model_config():
        raise ConfigError("resume checkpoint was trained with a different model config")
    metrics = cfg.io.metrics_log or str(out.with_suffix(".metrics.jsonl"))
    ckpt_dir = out.parent / (out.stem + "_steps") if cfg.train.checkpoint_every else None
    _, ckpt = run_training(cfg, v, file_sha256(cfg.io.input), ckpt_dir, metrics, resume)
    save_checkpoint(ckpt, out)
    log.info("wrote checkpoint %s", out)
    return EXIT_OK


def _model_from(cfg: RunConfig):
    if cfg.io.identity_model:
        return IdentityModel(), "identity"
    ckpt = load_checkpoint(cfg.io.checkpoint)
    return ckpt.build_model(), file_sha256(cfg.io.checkpoint)


def cmd_reconstruct(cfg: RunConfig, parser) -> int:
    out = Path(_require(cfg.io.output, "output volume (--out or io.output)", parser))
    if not cfg.io.identity_model:
        _require(cfg.io.checkpoint, "checkpoint (--checkpoint or io.checkpoint)", parser)
    v = _load_input(cfg, parser)
    model, ckpt_hash = _model_from(cfg)
    try:
        recon = reconstruct(v, model, cfg.reconstruct)
    except IsoEMError as exc:
        shape, spacing = reconstruction_geometry(v.shape, v.spacing)
        raise type(exc)(f"{exc} (input {v.shape} @ {v.spacing} nm, target {shape} @ {spacing} nm)") from exc
    save_volume(recon, out, cfg.io.output_format, cfg.io.output_dtype, cfg.io.dataset)
    record = _provenance(
        cfg,
        checkpoint_sha256=ckpt_hash,
        input_sha256=file_sha256(cfg.io.input),
        input_geometry={"shape": list(v.shape), "spacing_nm": list(v.spacing)},
        output_geometry={"shape": list(recon.shape), "spacing_nm": list(recon.spacing)},
        options=cfg.reconstruct.to_dict(),
    )
    Path(str(out) + ".provenance.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, parser) -> int:
    out = Path(_require(cfg.io.output, "report directory (--out or io.output)", parser))
    iso = _load_input(cfg, parser)
    settings = {"run_config": cfg.to_dict(locations=False), "input_sha256": file_sha256(cfg.io.input)}
    model, train_fn = None, None
    if cfg.io.identity_model:
        model, settings["model"] = IdentityModel(), "identity"
    elif cfg.io.checkpoint:
        model, settings["checkpoint_sha256"] = _model_from(cfg)
    else:
        def train_fn(aniso):
            m, _ = run_training(cfg, aniso)
            return m
        settings["model"] = "trained in place on the anisotropic volume"
    report, vols = evaluate_synthetic(iso, cfg.degradation, model=model, opts=cfg.reconstruct, cfg=cfg.eval,
                                      train_fn=train_fn, settings=settings)
    write_report(report, out, vols, gt=iso)
    if cfg.io.save_volumes:
        for name, vol in vols.items():
            save_volume(vol, out / f"{name}.tif")
    sys.stdout.write(report.to_table())
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom,
    "synthesize": cmd_synthesize,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "evaluate": cmd_evaluate,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, parser)
    except IsoEMError as exc:
        print(f"isoem {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        code = VolumeIOError.exit_code if isinstance(exc, OSError) else ConfigError.exit_code
        print(f"isoem {args.command}: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
