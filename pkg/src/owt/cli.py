"""Command-line entry point: ``owt gen|train|eval``.

One process per command; every command is deterministic given its config,
seed, and data file.  Exit codes: 0 success, 2 usage or config error,
3 training divergence (last good checkpoint retained), 4 shape mismatch.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import evalkit as E
from . import layers as L
from . import phantoms as P
from . import training as TR
from .model import (
    ModelConfig,
    OwtModel,
    RetainedSelection,
    encode,
    forward_holistic,
    forward_owt,
    organ_collect,
)
from .tensor import DiffTensor, DimensionError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_SHAPE = 4


class ConfigKeyError(ValueError):
    """Unknown or missing configuration key."""


# ---------------------------------------------------------------------------
# run configuration (strict: unknown keys are rejected, defaults documented)

CONFIG_DEFAULTS = {
    "model": {
        "patch": 4,            # patch edge in pixels
        "dim": 64,             # token embedding width
        "heads": 4,            # attention heads (must divide dim)
        "enc_blocks": 2,
        "tge_blocks": 2,
        "dec_blocks": 2,
        "groups": 3,           # semantic groups; background is one more
        "tokens_per_group": 4,
        "adaptive": False,     # size groups by the fourth root of region volume
        "token_budget": None,  # total tokens in adaptive mode (default: uniform total)
    },
    "train": {
        "base_lr": 1e-4,
        "batch": 96,
        "epochs": 1200,
        "warmup_epochs": 60,
        "seed": 0,
        "perceptual_weight": 0.0,
        "mode": "tgr",             # tgr | holistic | semi
        "labeled_fraction": 1.0,   # semi mode: fraction with usable labels
        "stage1_epochs": 600,      # semi mode: holistic pretraining epochs
        "weight_decay": 0.05,
    },
    "data": {
        "path": None,
        "spec": None,  # inline phantom spec (see `owt gen` flags) instead of a path
    },
    "eval": {
        "theta_noise": 0.02,
        "theta_mask": 0.15,
    },
}


def merge_config(doc: dict) -> dict:
    """Overlay a user config onto the defaults, rejecting unknown keys."""
    if not isinstance(doc, dict):
        raise ConfigKeyError("config root must be a JSON object")
    merged = {section: dict(defaults) for section, defaults in CONFIG_DEFAULTS.items()}
    for section, body in doc.items():
        if section not in merged:
            raise ConfigKeyError(f"unknown config section {section!r}")
        if not isinstance(body, dict):
            raise ConfigKeyError(f"config section {section!r} must be an object")
        for key, value in body.items():
            if section == "data" and key == "spec":
                merged[section][key] = value
                continue
            if key not in merged[section]:
                raise ConfigKeyError(f"unknown key {section}.{key}")
            merged[section][key] = value
    return merged


def load_config(path) -> dict:
    with open(path) as fh:
        return merge_config(json.load(fh))


def _spec_from_config(body: dict) -> P.PhantomSpec:
    known = {f for f in P.PhantomSpec.__dataclass_fields__}
    unknown = set(body) - known
    if unknown:
        raise ConfigKeyError(f"unknown data.spec keys {sorted(unknown)}")
    if "group_intensities" in body and body["group_intensities"] is not None:
        body = dict(body)
        body["group_intensities"] = tuple(body["group_intensities"])
    return P.PhantomSpec(**body)


def _load_samples(cfg: dict, data_arg) -> tuple[list[P.PhantomSample], int, str]:
    """Returns (samples, group count, dataset hash)."""
    path = data_arg or cfg["data"]["path"]
    if path:
        samples, groups = P.read_owtd(path)
        return samples, groups, E.sha256_file(path)
    spec_body = cfg["data"]["spec"]
    if spec_body is None:
        raise ConfigKeyError("no data: give --data, data.path, or data.spec")
    spec = _spec_from_config(spec_body)
    return P.generate(spec), spec.groups, f"spec:{spec.seed}:{spec.count}"


def _model_config(cfg: dict, samples: list[P.PhantomSample], groups: int) -> ModelConfig:
    body = cfg["model"]
    if body["adaptive"]:
        volumes = np.zeros(groups + 1)
        for s in samples:
            for g in range(groups + 1):
                volumes[g] += int((s.labels == g).sum())
        volumes /= len(samples)
        budget = body["token_budget"] or body["tokens_per_group"] * (groups + 1)
        counts = TR.allocate_tokens(volumes, budget)
        return ModelConfig(
            patch=body["patch"], dim=body["dim"], heads=body["heads"],
            enc_blocks=body["enc_blocks"], tge_blocks=body["tge_blocks"],
            dec_blocks=body["dec_blocks"], groups=groups,
            tokens_per_group=None, group_token_counts=tuple(counts))
    return ModelConfig(
        patch=body["patch"], dim=body["dim"], heads=body["heads"],
        enc_blocks=body["enc_blocks"], tge_blocks=body["tge_blocks"],
        dec_blocks=body["dec_blocks"], groups=groups,
        tokens_per_group=body["tokens_per_group"])


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args) -> int:
    try:
        spec = P.PhantomSpec(
            height=args.height, width=args.width, groups=args.groups,
            seed=args.seed, count=args.count,
            lesion_probability=args.lesion_prob,
            min_region_area=args.min_area, max_region_area=args.max_area)
        samples = P.generate(spec)
        P.write_owtd(samples, args.out)
    except (P.SpecError, P.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    print(f"wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _write_run_artifacts(out_dir: Path, cfg: dict, model: OwtModel) -> None:
    (out_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    (out_dir / "model.json").write_text(model.config.to_json())
    L.save_checkpoint(model.named_parameters(), out_dir / "model.owtw")


def cmd_train(args) -> int:
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["train"]["seed"] = args.seed
        samples, groups, _ = _load_samples(cfg, args.data)
        model_cfg = _model_config(cfg, samples, groups)
    except (ConfigKeyError, TR.ConfigError, P.SpecError, P.FormatError,
            json.JSONDecodeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    H, W, _ = samples[0].image.shape
    tr = cfg["train"]
    try:
        model = OwtModel.create(model_cfg, H, W, seed=tr["seed"])
    except DimensionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    tgr_cfg = TR.TgrConfig(
        base_lr=tr["base_lr"], effective_batch=tr["batch"], epochs=tr["epochs"],
        warmup_epochs=tr["warmup_epochs"], seed=tr["seed"],
        loss_perceptual_weight=tr["perceptual_weight"],
        semi_stage1_epochs=tr["stage1_epochs"], weight_decay=tr["weight_decay"])

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = TR.TrainLog(out_dir / "train_log.csv")

    def checkpoint(_epoch: int) -> None:
        L.save_checkpoint(model.named_parameters(), out_dir / "model.owtw")

    try:
        if tr["mode"] == "semi":
            TR.train_semi(samples, tr["labeled_fraction"], model, tgr_cfg, log=log)
        elif tr["mode"] in ("tgr", "holistic"):
            TR.run_training(samples, model, tgr_cfg, mode=tr["mode"], log=log,
                            on_epoch=checkpoint)
        else:
            print(f"error: unknown train.mode {tr['mode']!r}", file=sys.stderr)
            return EXIT_USAGE
    except TR.DivergenceError as exc:
        # the per-epoch checkpoint from the last finite epoch stays on disk
        log.write()
        (out_dir / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
        print(f"error: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (TR.ConfigError, TR.DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    _write_run_artifacts(out_dir, cfg, model)
    print(f"trained {tr['mode']} model -> {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _load_model(checkpoint_arg, samples: list[P.PhantomSample]) -> OwtModel:
    ckpt_path = Path(checkpoint_arg)
    if ckpt_path.is_dir():
        meta_path = ckpt_path / "model.json"
        ckpt_path = ckpt_path / "model.owtw"
    else:
        meta_path = ckpt_path.with_name("model.json")
    model_cfg = ModelConfig.from_json(meta_path.read_text())
    H, W, _ = samples[0].image.shape
    model = OwtModel.create(model_cfg, H, W, seed=0)
    L.load_params_into(model.named_parameters(), L.load_checkpoint(ckpt_path))
    return model


def _single_group_recon(model: OwtModel, sample: P.PhantomSample, group: int) -> np.ndarray:
    pred, _, _ = forward_owt(DiffTensor(sample.image), RetainedSelection((group,)), model)
    return pred.data


def _parse_groups(value: str, groups: int) -> list[int] | str:
    if value in ("all", "each"):
        return value
    try:
        chosen = [int(v) for v in value.split(",")]
    except ValueError:
        raise ConfigKeyError(f"bad --groups value {value!r}") from None
    for g in chosen:
        if not 0 <= g <= groups:
            raise ConfigKeyError(f"group {g} out of range 0..{groups}")
    return chosen


def cmd_eval(args) -> int:
    try:
        cfg = load_config(args.config) if args.config else merge_config({})
        samples, groups, data_hash = _load_samples(cfg, args.data)
        group_mode = _parse_groups(args.groups, groups)
    except (ConfigKeyError, P.FormatError, P.SpecError, json.JSONDecodeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        model = _load_model(args.checkpoint, samples)
        if model.config.groups != groups:
            raise DimensionError(
                f"model has {model.config.groups} groups, data has {groups}")
    except (DimensionError, L.CheckpointError) as exc:
        print(f"error: shape mismatch: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    theta_noise = cfg["eval"]["theta_noise"]
    theta_mask = cfg["eval"]["theta_mask"]
    ckpt_file = Path(args.checkpoint)
    if ckpt_file.is_dir():
        ckpt_file = ckpt_file / "model.owtw"
    report = E.MetricReport(model_hash=E.sha256_file(ckpt_file), dataset_hash=data_hash,
                            noise_floor=theta_noise, mask_threshold=theta_mask)

    if args.flops:
        gcfg = model.config
        breakdown = E.count_flops(
            dim=gcfg.dim, heads=gcfg.heads, tokens=model.grid.tokens,
            enc_blocks=gcfg.enc_blocks, dec_blocks=gcfg.dec_blocks,
            tge_blocks=gcfg.tge_blocks, group_tokens=gcfg.total_group_tokens)
        (out_dir / "flops.json").write_text(json.dumps(breakdown.gflops(), indent=2))
        print("stage GFLOPs (projection MACs / 1e9):")
        for stage, value in breakdown.gflops().items():
            print(f"  {stage:14s} {value:10.4f}")

    if args.metrics:
        all_groups = RetainedSelection(tuple(range(groups + 1)))
        for i, sample in enumerate(samples):
            if group_mode == "all":
                pred, _, _ = forward_owt(DiffTensor(sample.image), all_groups, model)
                report.per_sample_mse.append(E.mse(pred.data, sample.image))
                report.per_sample_ssim.append(E.ssim(pred.data, sample.image))
            elif group_mode == "each":
                for g in range(1, groups + 1):
                    recon = _single_group_recon(model, sample, g)
                    mask = E.segment_by_threshold(recon, theta_noise, theta_mask)
                    report.per_group_dice.setdefault(g, []).append(
                        E.dice(mask, sample.labels == g))
            else:
                sel = RetainedSelection(tuple(group_mode))
                pred, _, _ = forward_owt(DiffTensor(sample.image), sel, model)
                target = TR.mask_target(sample.image, sample.labels, sel)
                report.per_sample_mse.append(E.mse(pred.data, target.image))
                for g in group_mode:
                    if g == 0:
                        continue
                    recon = _single_group_recon(model, sample, g)
                    mask = E.segment_by_threshold(recon, theta_noise, theta_mask)
                    report.per_group_dice.setdefault(g, []).append(
                        E.dice(mask, sample.labels == g))
        (out_dir / "metrics.json").write_text(report.to_json())
        print(json.dumps(report.aggregates(), indent=2, sort_keys=True))

    if args.retrieval or args.probe or args.project:
        token_sets = []
        holistic_means = []
        for sample in samples:
            emb = encode(DiffTensor(sample.image), model)
            tset, _ = organ_collect(emb, model)
            token_sets.append(tset)
            holistic_means.append(emb.tokens.data.mean(axis=0))

    if args.retrieval:
        rows = []
        for g in range(1, groups + 1):
            index = []
            for i, tset in enumerate(token_sets):
                lo, hi = tset.span(g)
                index.append((i, tset.tokens.data[lo:hi]))
            for i, tokens in index:
                for case_id, dist in E.retrieve_topk(tokens, index, k=args.topk):
                    rows.append((f"q{i}->c{case_id}", g, dist))
        E.write_retrieval_csv(rows, out_dir / "retrieval.csv")
        print(f"retrieval.csv: {len(rows)} rows")

    if args.probe:
        results = {}
        for g in range(1, groups + 1):
            labels = np.array([s.lesions[g - 1] for s in samples], dtype=float)
            feats_group = np.stack([
                tset.tokens.data[slice(*tset.span(g))].mean(axis=0) for tset in token_sets])
            feats_holistic = np.stack(holistic_means)
            try:
                results[f"group{g}_tokens"] = E.linear_probe(feats_group, labels)
                results[f"group{g}_holistic"] = E.linear_probe(feats_holistic, labels)
            except E.EvalError as exc:
                results[f"group{g}_error"] = str(exc)
        (out_dir / "probe.json").write_text(json.dumps(results, indent=2, sort_keys=True))
        print(json.dumps(results, indent=2, sort_keys=True))

    if args.project:
        vectors = []
        meta = []
        for i, tset in enumerate(token_sets):
            for g in range(groups + 1):
                lo, hi = tset.span(g)
                vectors.append(tset.tokens.data[lo:hi].mean(axis=0))
                meta.append((i, g))
        proj = E.pca_project(np.stack(vectors), dims=2)
        rows = [(case, g, proj.coords[j, 0], proj.coords[j, 1])
                for j, (case, g) in enumerate(meta)]
        E.write_projection_csv(rows, out_dir / "projection.csv")
        print(f"projection.csv: {len(rows)} rows "
              f"(explained variance {[round(v, 4) for v in proj.explained_variance]})")

    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="owt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a labeled phantom dataset")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--count", type=int, default=16)
    gen.add_argument("--height", type=int, default=32)
    gen.add_argument("--width", type=int, default=32)
    gen.add_argument("--groups", type=int, default=3)
    gen.add_argument("--lesion-prob", type=float, default=0.25)
    gen.add_argument("--min-area", type=int, default=30)
    gen.add_argument("--max-area", type=int, default=140)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen)

    train = sub.add_parser("train", help="train a model from a JSON config")
    train.add_argument("--config", required=True)
    train.add_argument("--data", default=None, help="OWTD file (overrides data.path)")
    train.add_argument("--out", required=True, help="output directory")
    train.add_argument("--seed", type=int, default=None, help="override train.seed")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--checkpoint", required=True, help="run directory or .owtw file")
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--config", default=None, help="for eval thresholds")
    ev.add_argument("--groups", default="all", help="all | each | comma list")
    ev.add_argument("--metrics", action="store_true")
    ev.add_argument("--retrieval", action="store_true")
    ev.add_argument("--probe", action="store_true")
    ev.add_argument("--project", action="store_true")
    ev.add_argument("--flops", action="store_true")
    ev.add_argument("--topk", type=int, default=5)
    ev.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
