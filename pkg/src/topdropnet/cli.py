"""Command-line surface: gendata, train, eval, activations, ablation.

Settings merge from an optional flat ``key = value`` config file and
command-line flags (flags win); unknown file keys are rejected and the
fully resolved configuration is echoed into the output directory, so any
run can be reproduced bitwise from its echo. No command writes outside
its --out directory.
"""

import argparse
import os
import shutil
import sys
from dataclasses import dataclass

import numpy as np

from . import evaluation, network, ppm, synthdata, topdrop, trainer


@dataclass(frozen=True)
class Opt:
    key: str
    kind: str  # int | float | str | bool | ints | floats | strs
    default: object
    help: str
    required: bool = False


def _parse_value(kind: str, text: str):
    if kind == "int":
        return int(text)
    if kind == "float":
        return float(text)
    if kind == "str":
        return text
    if kind == "bool":
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"bad boolean {text!r}")
    if kind == "ints":
        return tuple(int(v) for v in text.split(",") if v != "")
    if kind == "floats":
        return tuple(float(v) for v in text.split(",") if v != "")
    if kind == "strs":
        return tuple(v for v in text.split(",") if v != "")
    raise ValueError(f"unknown option kind {kind}")


def _format_value(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind in ("ints", "strs"):
        return ",".join(str(v) for v in value)
    if kind == "floats":
        return ",".join(repr(float(v)) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


def _read_config_file(path, schema):
    allowed = {opt.key for opt in schema}
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, text = body.partition("=")
            key = key.strip()
            if key not in allowed:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            opt = next(o for o in schema if o.key == key)
            values[key] = _parse_value(opt.kind, text.strip())
    return values


def _resolve(schema, args) -> dict:
    file_values = _read_config_file(args.config, schema) if args.config else {}
    resolved = {}
    for opt in schema:
        dest = opt.key.replace("-", "_")
        cli_value = getattr(args, dest, None)
        if cli_value is not None:
            resolved[opt.key] = cli_value
        elif opt.key in file_values:
            resolved[opt.key] = file_values[opt.key]
        else:
            resolved[opt.key] = opt.default
        if opt.required and resolved[opt.key] is None:
            raise ValueError(f"missing required setting {opt.key!r}")
    return resolved


def _echo_config(out_dir, schema, resolved) -> None:
    lines = []
    for opt in sorted(schema, key=lambda o: o.key):
        value = resolved[opt.key]
        if value is None or opt.key == "force":
            continue
        lines.append(f"{opt.key} = {_format_value(opt.kind, value)}")
    with open(os.path.join(out_dir, "resolved.cfg"), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def _variant_internal(name: str) -> str:
    return name.replace("-", "_")


def _variant_public(name: str) -> str:
    return name.replace("_", "-")


# ---------------------------------------------------------------------------
# Schemas
# ---------------------------------------------------------------------------

_TRAIN_COMMON = [
    Opt("base-lr", "float", 1e-3, "plateau learning rate"),
    Opt("warmup-fraction", "float", 0.125, "fraction of epochs spent warming up"),
    Opt("milestones", "floats", (0.5, 0.75), "decay milestones as fractions"),
    Opt("decay-factor", "float", 0.1, "learning-rate decay per milestone"),
    Opt("batch-p", "int", 8, "identities per batch"),
    Opt("batch-k", "int", 4, "instances per identity"),
    Opt("margin", "float", 0.3, "triplet margin"),
    Opt("epsilon", "float", 0.1, "label smoothing"),
    Opt("height-ratio", "float", 0.3, "fraction of rows to drop"),
    Opt("power", "float", 2.0, "activation-map exponent"),
    Opt("d-global", "int", 128, "global stream feature size"),
    Opt("d-drop", "int", 128, "drop stream feature size"),
]

SCHEMAS = {
    "gendata": [
        Opt("out", "str", None, "dataset directory", required=True),
        Opt("ids", "int", 32, "number of identities"),
        Opt("cams", "int", 4, "number of cameras"),
        Opt("per", "int", 4, "images per (identity, camera)"),
        Opt("occlusion", "float", 0.1, "per-image band occlusion probability"),
        Opt("height", "int", 64, "image height"),
        Opt("width", "int", 32, "image width"),
        Opt("seed", "int", 1, "generation seed"),
        Opt("force", "bool", False, "overwrite an existing dataset directory"),
    ],
    "train": [
        Opt("out", "str", None, "output directory", required=True),
        Opt("data", "str", None, "dataset directory", required=True),
        Opt("variant", "str", "full", "full | no-drop | no-reg | baseline-bdb"),
        Opt("epochs", "int", 40, "total epochs"),
        Opt("seed", "int", 1, "master seed"),
        Opt("seeds", "ints", None, "run the repeat protocol over these seeds"),
    ]
    + _TRAIN_COMMON,
    "eval": [
        Opt("out", "str", None, "output directory", required=True),
        Opt("data", "str", None, "dataset directory", required=True),
        Opt("checkpoint", "str", None, "trained checkpoint", required=True),
        Opt("rerank", "bool", False, "also report k-reciprocal re-ranked metrics"),
        Opt("k1", "int", 20, "re-ranking neighborhood"),
        Opt("k2", "int", 6, "local expansion neighborhood"),
        Opt("lambda", "float", 0.3, "blend toward the original distance"),
        Opt("max-rank", "int", 50, "CMC curve length"),
        Opt("save-embeddings", "bool", False, "write query/gallery embedding CSVs"),
    ],
    "activations": [
        Opt("out", "str", None, "output directory", required=True),
        Opt("checkpoint", "str", None, "trained checkpoint", required=True),
        Opt("images", "strs", None, "input PPM images", required=True),
        Opt("tau", "float", 0.5, "threshold as a fraction of the activation max"),
        Opt("alpha", "float", 0.5, "overlay blend weight"),
        Opt("power", "float", 2.0, "activation-map exponent"),
        Opt("height-ratio", "float", 0.3, "fraction of rows to drop"),
        Opt("show-dropmask", "bool", False, "also render the drop mask"),
    ],
    "ablation": [
        Opt("out", "str", None, "output directory", required=True),
        Opt("data", "str", None, "dataset directory", required=True),
        Opt("seeds", "ints", (1, 2, 3, 4, 5), "paired seeds for every variant"),
        Opt("epochs", "int", 40, "total epochs per run"),
    ]
    + _TRAIN_COMMON,
}


def _train_config(cfg: dict, variant: str, seed: int, epochs=None) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        total_epochs=epochs if epochs is not None else cfg["epochs"],
        base_lr=cfg["base-lr"],
        warmup_fraction=cfg["warmup-fraction"],
        decay_milestones=tuple(cfg["milestones"]),
        decay_factor=cfg["decay-factor"],
        batch=synthdata.BatchSpec(cfg["batch-p"], cfg["batch-k"]),
        variant=variant,
        margin=cfg["margin"],
        label_epsilon=cfg["epsilon"],
        height_ratio=cfg["height-ratio"],
        activation_power=cfg["power"],
        d_global=cfg["d-global"],
        d_drop=cfg["d-drop"],
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gendata(cfg: dict) -> None:
    out = cfg["out"]
    if os.path.exists(out):
        if not cfg["force"]:
            raise FileExistsError(f"{out} exists; pass --force to overwrite")
        shutil.rmtree(out)
    os.makedirs(out)
    _echo_config(out, SCHEMAS["gendata"], cfg)
    records = synthdata.generate_dataset(
        out,
        num_ids=cfg["ids"],
        num_cams=cfg["cams"],
        imgs_per_id_per_cam=cfg["per"],
        occlusion_prob=cfg["occlusion"],
        size=(cfg["height"], cfg["width"]),
        seed=cfg["seed"],
    )
    print(f"wrote {len(records)} images under {out}")


def _run_training(cfg: dict, dataset, variant: str, seed: int, run_dir: str, epochs=None):
    os.makedirs(run_dir, exist_ok=True)
    train_cfg = _train_config(cfg, variant, seed, epochs)
    result = trainer.fit(train_cfg, dataset)
    trainer.save_checkpoint(os.path.join(run_dir, "checkpoint.ckpt"), result)
    trainer.write_history(os.path.join(run_dir, "history.csv"), result.history)
    return result


def cmd_train(cfg: dict) -> None:
    dataset = synthdata.load_dataset(cfg["data"])
    variant = _variant_internal(cfg["variant"])
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    _echo_config(out, SCHEMAS["train"], cfg)
    seeds = cfg["seeds"]
    if seeds is None:
        result = _run_training(cfg, dataset, variant, cfg["seed"], out)
        print(f"trained {variant} for {len(result.history)} epochs; final loss {result.history[-1]['loss_total']:.4f}")
        return
    finals = []
    for seed in seeds:
        result = _run_training(cfg, dataset, variant, seed, os.path.join(out, f"seed{seed}"))
        finals.append(result.history[-1])
        print(f"seed {seed}: final loss {result.history[-1]['loss_total']:.4f}")
    import csv

    with open(os.path.join(out, "summary.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "mean", "std"])
        for key in ("loss_global", "loss_drop", "loss_reg", "loss_total"):
            values = [row[key] for row in finals if row[key] is not None]
            if values:
                writer.writerow([key, repr(float(np.mean(values))), repr(float(np.std(values)))])


def _rerank_params(cfg: dict, n_gallery: int) -> evaluation.RerankParams:
    # Keep k1 sensible on small galleries.
    k1 = max(1, min(cfg["k1"], n_gallery // 2))
    k2 = max(1, min(cfg["k2"], k1))
    return evaluation.RerankParams(k1=k1, k2=k2, lam=cfg["lambda"])


def _print_result(tag: str, result: evaluation.EvalResult) -> None:
    parts = [f"mAP {result.mAP:.4f}"]
    for rank in (1, 5, 10):
        if rank <= result.cmc.size:
            parts.append(f"rank-{rank} {result.cmc[rank - 1]:.4f}")
    print(f"{tag}: " + "  ".join(parts))


def cmd_eval(cfg: dict) -> None:
    if not os.path.exists(cfg["checkpoint"]):
        raise FileNotFoundError(f"checkpoint {cfg['checkpoint']} does not exist")
    dataset = synthdata.load_dataset(cfg["data"])
    model = trainer.model_from_checkpoint(cfg["checkpoint"])
    if tuple(dataset.image_size) != tuple(model.cfg.backbone.input_size):
        raise ValueError(
            f"dataset images are {dataset.image_size} but the checkpoint expects {model.cfg.backbone.input_size}"
        )
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    _echo_config(out, SCHEMAS["eval"], cfg)

    query = evaluation.embed_split(model, dataset, "query")
    gallery = evaluation.embed_split(model, dataset, "gallery")
    params = _rerank_params(cfg, gallery.features.shape[0])
    raw, reranked = evaluation.evaluate_run(query, gallery, cfg["rerank"], params, cfg["max-rank"])
    evaluation.save_results(os.path.join(out, "metrics_raw.csv"), raw)
    _print_result("raw", raw)
    if reranked is not None:
        evaluation.save_results(os.path.join(out, "metrics_rerank.csv"), reranked)
        _print_result("reranked", reranked)
    if cfg["save-embeddings"]:
        evaluation.save_embeddings(os.path.join(out, "embeddings_query.csv"), query)
        evaluation.save_embeddings(os.path.join(out, "embeddings_gallery.csv"), gallery)


def _upscale_nearest(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    rows = (np.arange(h) * arr.shape[0]) // h
    cols = (np.arange(w) * arr.shape[1]) // w
    return arr[rows][:, cols]


def _to_gray(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def cmd_activations(cfg: dict) -> None:
    if not os.path.exists(cfg["checkpoint"]):
        raise FileNotFoundError(f"checkpoint {cfg['checkpoint']} does not exist")
    for path in cfg["images"]:
        if not os.path.exists(path):
            raise FileNotFoundError(f"input image {path} does not exist")
    model = trainer.model_from_checkpoint(cfg["checkpoint"]).eval()
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    _echo_config(out, SCHEMAS["activations"], cfg)

    for path in cfg["images"]:
        img = ppm.read_ppm(path)
        h, w = img.shape[:2]
        features = model.backbone_forward(network.normalize_images(img[None])).data[0]
        act = topdrop.activation_map(features, cfg["power"])
        base = os.path.splitext(os.path.basename(path))[0]

        act_up = _upscale_nearest(act, h, w)
        ppm.write_pgm(os.path.join(out, f"{base}_activation.pgm"), _to_gray(act_up))

        peak = act_up.max()
        threshold = (act_up >= cfg["tau"] * peak) if peak > 0 else np.zeros_like(act_up, dtype=bool)
        ppm.write_pgm(os.path.join(out, f"{base}_threshold.pgm"), threshold.astype(np.uint8) * 255)

        alpha = cfg["alpha"]
        overlay = (1.0 - alpha) * img.astype(np.float64)
        overlay[:, :, 0] += alpha * _to_gray(act_up)
        ppm.write_ppm(os.path.join(out, f"{base}_overlay.ppm"), np.clip(np.rint(overlay), 0, 255).astype(np.uint8))

        if cfg["show-dropmask"]:
            drop_cfg = topdrop.DropConfig(cfg["height-ratio"], cfg["power"], "top")
            mask = topdrop.top_drop_mask(topdrop.stripe_relevance(act), drop_cfg, features.shape)
            rows = mask.expand()[0]  # (h, w), identical across channels
            mask_up = _upscale_nearest(rows, h, w)
            ppm.write_pgm(os.path.join(out, f"{base}_dropmask.pgm"), (mask_up * 255).astype(np.uint8))
    print(f"wrote activation exports for {len(cfg['images'])} images under {out}")


def cmd_ablation(cfg: dict) -> None:
    dataset = synthdata.load_dataset(cfg["data"])
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    _echo_config(out, SCHEMAS["ablation"], cfg)

    rows = []
    for variant in network.VARIANTS:
        maps, rank1s = [], []
        for seed in cfg["seeds"]:
            run_dir = os.path.join(out, _variant_public(variant), f"seed{seed}")
            result = _run_training(cfg, dataset, variant, seed, run_dir, epochs=cfg["epochs"])
            query = evaluation.embed_split(result.model, dataset, "query")
            gallery = evaluation.embed_split(result.model, dataset, "gallery")
            raw, _ = evaluation.evaluate_run(query, gallery)
            evaluation.save_results(os.path.join(run_dir, "metrics.csv"), raw)
            maps.append(raw.mAP)
            rank1s.append(float(raw.cmc[0]))
            print(f"{_variant_public(variant)} seed {seed}: mAP {raw.mAP:.4f} rank-1 {raw.cmc[0]:.4f}")
        rows.append(
            [
                _variant_public(variant),
                repr(float(np.mean(maps))),
                repr(float(np.std(maps))),
                repr(float(np.mean(rank1s))),
                repr(float(np.std(rank1s))),
            ]
        )
    import csv

    with open(os.path.join(out, "ablation.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "map_mean", "map_std", "rank1_mean", "rank1_std"])
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "gendata": cmd_gendata,
    "train": cmd_train,
    "eval": cmd_eval,
    "activations": cmd_activations,
    "ablation": cmd_ablation,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="topdropnet")
    subs = parser.add_subparsers(dest="command", required=True)
    for command, schema in SCHEMAS.items():
        sub = subs.add_parser(command)
        sub.add_argument("--config", default=None, help="flat key = value settings file")
        for opt in schema:
            flag = f"--{opt.key}"
            if opt.kind == "bool":
                sub.add_argument(flag, action="store_true", default=None, help=opt.help)
            else:
                sub.add_argument(flag, default=None, help=opt.help)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    schema = SCHEMAS[args.command]
    try:
        raw = {}
        for opt in schema:
            value = getattr(args, opt.key.replace("-", "_"))
            if value is not None and opt.kind != "bool":
                value = _parse_value(opt.kind, value)
            raw[opt.key.replace("-", "_")] = value
        ns = argparse.Namespace(config=args.config, **raw)
        cfg = _resolve(schema, ns)
        _COMMANDS[args.command](cfg)
        return 0
    except Exception as exc:  # surface a clean message, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
