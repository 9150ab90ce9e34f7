"""Command-line surface: data generation, training, evaluation, protocols,
gradient checking, and diagnostics.

Configuration is plain ``key = value`` text with ``#`` comments; command-line
flags override file values, and the effective configuration is echoed into
every output directory. Unknown keys are rejected before any computation.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import data as dat
from . import protocols as proto
from .checkpoint import build_model, load_checkpoint, load_optimizer, save_checkpoint
from .encoder import ModelConfig
from .metrics import attention_map, evaluate, panel_cosine
from .model import init_model
from .plots import svg_heatmap, svg_line, svg_scatter
from .tensor import Rng, Tensor, grad_check
from .training import OptimizerState, TrainConfig, fit, smooth_l1

DEFAULT_KINDS = ",".join(dat.DISTORTION_KINDS)


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Every tunable in one record; defaults follow the full-size recipe."""
    # architecture
    patch_size: int = 16
    token_dim: int = 384
    heads: int = 6
    encoder_depth: int = 12
    decoder_depth: int = 1
    panel_size: int = 6
    mlp_ratio: float = 4.0
    channels: int = 3
    crop_hw: int = 224
    variant: str = "full"
    # training
    epochs: int = 9
    base_lr: float = 2e-4
    lr_decay_factor: float = 10.0
    decay_every_epochs: int = 3
    batch_size: int = 16
    crops_per_image: int = 10
    weight_decay: float = 1e-4
    smooth_l1_beta: float = 1.0
    normalize_scores: bool = False
    # shared
    seed: int = 0
    precision: int = 64
    # synthetic data generation
    bases: int = 100
    kinds: str = DEFAULT_KINDS
    levels: int = 5
    image_hw: int = 64
    # evaluation / protocols
    eval_crops: int = 10
    mode: str = "repeats"
    repeats: int = 10
    train_frac: float = 0.8

    @property
    def dtype(self):
        return np.float64 if self.precision == 64 else np.float32

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            patch_size=self.patch_size, token_dim=self.token_dim,
            heads=self.heads, encoder_depth=self.encoder_depth,
            decoder_depth=self.decoder_depth, panel_size=self.panel_size,
            mlp_ratio=self.mlp_ratio, channels=self.channels,
            crop_hw=self.crop_hw, variant=self.variant)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, base_lr=self.base_lr,
            lr_decay_factor=self.lr_decay_factor,
            decay_every_epochs=self.decay_every_epochs,
            batch_size=self.batch_size, crops_per_image=self.crops_per_image,
            seed=self.seed, precision=self.precision,
            weight_decay=self.weight_decay,
            smooth_l1_beta=self.smooth_l1_beta,
            normalize_scores=self.normalize_scores)

    def text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n"
                       for f in fields(self))


def _convert(name: str, kind, raw: str):
    raw = raw.strip()
    if kind is bool or kind == "bool":
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"bad boolean for {name}: {raw!r}")
    if kind is int or kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"bad integer for {name}: {raw!r}")
    if kind is float or kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"bad number for {name}: {raw!r}")
    return raw


def parse_config_file(path: str) -> dict:
    kinds = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in kinds:
                raise ConfigError(f"{path}:{line_no}: unknown config key {key!r}")
            out[key] = _convert(key, kinds[key], value)
    return out


def build_run_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(parse_config_file(args.config))
    for f in fields(RunConfig):
        override = getattr(args, f.name, None)
        if override is not None:
            values[f.name] = override
    return RunConfig(**values)


def _prepare_out(cfg: RunConfig, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.text())
    return out_dir


# -- commands -----------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg, args.out)
    kinds = [k.strip() for k in cfg.kinds.split(",") if k.strip()]
    manifest = dat.gen_synthetic_dataset(cfg.bases, cfg.levels, kinds,
                                         Rng(("gen", cfg.seed)),
                                         hw=cfg.image_hw)
    file_manifest = dat.materialize(manifest, out)
    dat.write_manifest(os.path.join(out, "manifest.csv"), file_manifest)
    print(f"wrote {len(file_manifest)} samples to {out}")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg, args.out)
    manifest = dat.read_manifest(args.manifest)
    train_cfg = cfg.train_config()
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        model = build_model(ckpt, config=cfg.model_config())
        state = load_optimizer(ckpt, model.named_parameters(),
                               weight_decay=cfg.weight_decay)
    else:
        model = init_model(cfg.model_config(), Rng(("model", cfg.seed)),
                           dtype=cfg.dtype)
        state = OptimizerState.init(model.named_parameters(),
                                    weight_decay=cfg.weight_decay)
    log = fit(model, manifest, train_cfg, state=state)
    log.write(os.path.join(out, "train.log"))
    save_checkpoint(os.path.join(out, "model.ckpt"), model, optimizer=state)
    svg_line(os.path.join(out, "loss.svg"), log.losses(), title="loss per step")
    train_report = evaluate(model, manifest, crops_per_image=cfg.eval_crops,
                            seed=cfg.seed)
    print(f"train srcc={train_report.srcc:.6f} plcc={train_report.plcc:.6f}")
    if args.test_manifest:
        test_report = evaluate(model, dat.read_manifest(args.test_manifest),
                               crops_per_image=cfg.eval_crops, seed=cfg.seed)
        print(f"test srcc={test_report.srcc:.6f} plcc={test_report.plcc:.6f}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg, args.out)
    model = build_model(load_checkpoint(args.checkpoint))
    manifest = dat.read_manifest(args.manifest)
    report = evaluate(model, manifest, crops_per_image=cfg.eval_crops,
                      seed=cfg.seed)
    report.write(os.path.join(out, "eval.txt"))
    svg_scatter(os.path.join(out, "scatter.svg"), report.labels,
                report.predictions, title="label vs prediction")
    print(f"n={report.n} srcc={report.srcc:.6f} plcc={report.plcc:.6f}")
    return 0


def cmd_protocol(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg, args.out)
    manifest = dat.read_manifest(args.manifest)
    model_cfg = cfg.model_config()
    train_cfg = cfg.train_config()
    kwargs = dict(repeats=cfg.repeats, eval_crops=cfg.eval_crops,
                  dtype=cfg.dtype)
    if cfg.mode == "repeats":
        report = proto.protocol_repeats(manifest, model_cfg, train_cfg,
                                        train_frac=cfg.train_frac, **kwargs)
    elif cfg.mode == "data-efficiency":
        report = proto.protocol_data_efficiency(manifest, model_cfg,
                                                train_cfg, **kwargs)
    elif cfg.mode == "depth-ablation":
        report = proto.protocol_depth_ablation(manifest, model_cfg,
                                               train_cfg, **kwargs)
    elif cfg.mode == "component-ablation":
        report = proto.protocol_component_ablation(manifest, model_cfg,
                                                   train_cfg, **kwargs)
    else:
        raise ConfigError(f"unknown protocol mode {cfg.mode!r}")
    report.write(os.path.join(out, "protocol.txt"))
    for line in report.lines():
        print(line)
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    from .model import forward_scores
    model = init_model(cfg.model_config(), Rng(("model", cfg.seed)),
                       dtype=np.float64)
    rng = Rng(("gradcheck", cfg.seed))
    img = Tensor(rng.uniform((1, cfg.channels, cfg.crop_hw, cfg.crop_hw)))
    target = Tensor(np.array([0.7]))

    def loss():
        return smooth_l1(forward_scores(model, img), target,
                         beta=cfg.smooth_l1_beta)

    err = grad_check(loss, model.named_parameters(), eps=args.eps)
    print(f"max_rel_error={err:.3e} eps={args.eps:.1e} "
          f"params={sum(p.size for p in model.named_parameters().values())}")
    return 0 if err <= args.tolerance else 1


def cmd_panel_sim(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg, args.out)
    model = build_model(load_checkpoint(args.checkpoint))
    manifest = dat.read_manifest(args.manifest)
    diag = panel_cosine(model, manifest)
    diag.write(os.path.join(out, "panel.txt"))
    svg_heatmap(os.path.join(out, "panel.svg"), diag.cosine,
                title="panel cosine similarity")
    print(f"mean_offdiag={diag.mean_offdiag():.6f} "
          f"mean_spread={diag.score_spread.mean():.6e}")
    return 0


def cmd_attn_map(cfg: RunConfig, args) -> int:
    out = _prepare_out(cfg, args.out)
    model = build_model(load_checkpoint(args.checkpoint))
    image = dat.read_image(args.image)
    from .metrics import _center_crop
    crop = _center_crop(image, model.config.crop_hw).astype(model.dtype)
    amap = attention_map(model, Tensor(crop))
    svg_heatmap(os.path.join(out, "attn.svg"), amap, title="quality attention")
    dat.write_ppm(os.path.join(out, "attn.ppm"), np.repeat(amap[None], 3, axis=0))
    print(f"attention map {amap.shape[0]}x{amap.shape[1]} written to {out}")
    return 0


# -- argument parsing ---------------------------------------------------------

def _add_shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--out", default="out", help="output directory")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type is bool or f.type == "bool":
            p.add_argument(flag, default=None, dest=f.name,
                           type=lambda s, n=f.name: _convert(n, bool, s))
        else:
            kind = {int: int, float: float, str: str}.get(
                f.type, {"int": int, "float": float, "str": str}.get(f.type, str))
            p.add_argument(flag, default=None, dest=f.name, type=kind)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="panelqa",
        description="Blind image quality assessment with an attention-panel "
                    "transformer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic labeled corpus")
    _add_shared(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fine-tune a model on a manifest")
    _add_shared(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--test-manifest", default=None)
    p.add_argument("--resume", default=None,
                   help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    _add_shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("protocol", help="repeat/ablation experiment protocols")
    _add_shared(p)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_protocol)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of all gradients")
    _add_shared(p)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("panel-sim", help="panel cosine-similarity diagnostics")
    _add_shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_panel_sim)

    p = sub.add_parser("attn-map", help="decoder attention heat map for one image")
    _add_shared(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_attn_map)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = build_run_config(args)
        return args.func(cfg, args)
    except Exception as exc:  # single-line machine-parsable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
