"""``dewarpflow`` command-line entry point.

Subcommands: synth, train, predict, rectify, eval, check.  Run configuration
comes from one YAML file (``--config``) plus ``--set key.path=value``
overrides; the resolved configuration is written next to every output.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

log = logging.getLogger("dewarpflow")

CONFIG_NAME = "config.yaml"
EVAL_COLUMNS = ("Method", "MS-SSIM", "LD")


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-3`` (no dot) as a float."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*(?:\.[0-9_]*)?|\.[0-9_]+)[eE][-+]?[0-9]+$"),
    list("-+0123456789."),
)


def _yaml(text):
    return yaml.load(text, Loader=_Loader)


class CliError(Exception):
    """A user-facing failure: printed without a traceback, exit status 2."""


# ---- configuration -----------------------------------------------------------

@dataclass
class SynthSection:
    h: int = 128
    w: int = 120
    n_perturbs: int = 4
    hue_jitter: float = 0.05
    sat_jitter: float = 0.2
    val_jitter: float = 0.15
    background: int | None = None


@dataclass
class DataSection:
    holdout: int = 0  # trailing manifest samples excluded from training


@dataclass
class RunConfig:
    seed: int = 0
    synth: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)

    def resolved(self) -> dict:
        """Validate every section and return the effective tree."""
        from .losses import LossWeights
        from .net import ModelConfig
        from .synthgen import AugmentSpec
        from .training import TrainConfig

        synth = _section(SynthSection, self.synth, "synth")
        AugmentSpec(synth.background, synth.hue_jitter, synth.sat_jitter, synth.val_jitter)
        model = ModelConfig.from_dict({"seed": self.seed, **self.model})
        tdict = {"seed": self.seed, **self.train}
        tdict["weights"] = asdict(_section(LossWeights, tdict.get("weights") or {}, "train.weights"))
        tc = TrainConfig.from_dict(tdict)
        data = _section(DataSection, self.data, "data")
        if data.holdout < 0:
            raise ValueError("data.holdout must be >= 0")
        mdict = asdict(model)
        mdict["stem_strides"] = list(model.stem_strides)
        mdict["pyramid_rates"] = list(model.pyramid_rates)
        tout = asdict(tc)
        tout["weights"] = asdict(tc.weights)
        return {"seed": self.seed, "synth": asdict(synth), "model": mdict, "train": tout, "data": asdict(data)}


def _section(cls, d, name):
    if not isinstance(d, dict):
        raise ValueError(f"config section {name!r} must be a mapping")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ValueError(f"unknown {name} config keys: {sorted(unknown)}")
    return cls(**d)


def _override(tree: dict, assignment: str):
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise CliError(f"--set expects key.path=value, got {assignment!r}")
    parts = key.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise CliError(f"--set {key}: {p!r} is not a section")
    node[parts[-1]] = _yaml(raw)


def load_config(path=None, overrides=(), seed=None) -> dict:
    """Read, override and validate a run configuration; unknown keys are errors."""
    tree = {}
    if path is not None:
        try:
            tree = _yaml(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as e:
            raise CliError(f"cannot read config {path}: {e}") from e
        if not isinstance(tree, dict):
            raise CliError(f"config {path} must be a mapping")
    for a in overrides:
        _override(tree, a)
    if seed is not None:
        tree["seed"] = seed
    try:
        return _section(RunConfig, tree, "top-level").resolved()
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid config: {e}") from e


def write_config(out_dir: Path, cfg: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / CONFIG_NAME).write_text(yaml.safe_dump(cfg, sort_keys=True))


# ---- subcommands -------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synthgen import AugmentSpec, write_dataset

    flags = [f"synth.{key}={getattr(args, flag)}" for flag, key in
             (("h", "h"), ("w", "w"), ("perturbs", "n_perturbs")) if getattr(args, flag) is not None]
    cfg = load_config(args.config, [*args.set, *flags], args.seed)
    s = cfg["synth"]
    if args.n < 0:
        raise CliError("--n must be >= 0")
    rng = np.random.default_rng(cfg["seed"])
    seeds = []
    while len(seeds) < args.n:
        v = int(rng.integers(0, 2**31 - 1))
        if v not in seeds:
            seeds.append(v)
    out = Path(args.out)
    augment = AugmentSpec(s["background"], s["hue_jitter"], s["sat_jitter"], s["val_jitter"])
    try:
        write_dataset(out, seeds, s["h"], s["w"], s["n_perturbs"], augment)
        write_config(out, cfg)
    except OSError as e:
        raise CliError(f"cannot write dataset to {out}: {e}") from e
    except ValueError as e:
        raise CliError(str(e)) from e
    log.info("wrote %d samples to %s", len(seeds), out)
    return 0


def cmd_train(args) -> int:
    from .net import CheckpointError, ModelConfig
    from .training import CHECKPOINT_NAME, TrainConfig, TrainingDiverged, load_dataset, train

    cfg = load_config(args.config, args.set, args.seed)
    data = Path(args.data)
    try:
        manifest = json.loads((data / "manifest.json").read_text())
        seeds = manifest["seeds"]
    except (OSError, ValueError, KeyError) as e:
        raise CliError(f"cannot read dataset manifest in {data}: {e}") from e
    holdout = cfg["data"]["holdout"]
    if holdout >= len(seeds):
        raise CliError(f"holdout {holdout} leaves no training samples out of {len(seeds)}")
    train_seeds = seeds[:len(seeds) - holdout]
    out = Path(args.out)
    resume = None
    if args.resume:
        resume = Path(args.resume) if args.resume != "auto" else out / CHECKPOINT_NAME
        if not resume.exists():
            raise CliError(f"checkpoint {resume} does not exist")
    try:
        arrays = load_dataset(data, train_seeds)
        write_config(out, cfg)
        (out / "train_seeds.json").write_text(json.dumps(train_seeds) + "\n")
        model_cfg = ModelConfig.from_dict(cfg["model"])
        train_cfg = TrainConfig.from_dict(cfg["train"])
        _, history = train(arrays, model_cfg, train_cfg, out, resume, args.max_iterations)
    except CheckpointError as e:
        raise CliError(f"corrupt checkpoint: {e}") from e
    except TrainingDiverged as e:
        raise CliError(f"training diverged: {e}") from e
    except (OSError, ValueError) as e:
        raise CliError(str(e)) from e
    if history:
        last = history[-1]
        log.info("finished epoch %d: total=%.5f l_d=%.4f", last["epoch"], last["total"], last["l_d"])
    return 0


def cmd_predict(args) -> int:
    from .flow_core import FlowField, ForegroundMask, load_image, save_flow
    from .net import CheckpointError, forward, load_checkpoint

    try:
        model, _, _ = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError) as e:
        raise CliError(f"cannot load checkpoint {args.checkpoint}: {e}") from e
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    for path in args.image:
        try:
            img = load_image(path)
            flow, prob = forward(model, [img], keep_graph=False)
        except (OSError, ValueError) as e:
            raise CliError(f"{path}: {e}") from e
        mask = (prob[0] >= args.threshold).astype(np.float32)
        target = out if len(args.image) == 1 else out / (Path(path).stem + ".dfl")
        target.parent.mkdir(parents=True, exist_ok=True)
        save_flow(target, FlowField(flow[0, 0] * mask, flow[0, 1] * mask), ForegroundMask(mask))
    return 0


def _side_by_side(panels, fill=1.0):
    h = max(p.shape[0] for p in panels)
    gap = np.full((h, 4, 3), fill)
    row = []
    for p in panels:
        pad = np.full((h, p.shape[1], 3), fill)
        pad[:p.shape[0]] = p
        row += [pad, gap]
    return np.concatenate(row[:-1], axis=1)


def cmd_rectify(args) -> int:
    from .flow_core import FlowFormatError, ImageRaster, load_flow, load_image, save_image
    from .rectifier import rectify_scaled

    lam = args.lam
    if not 0 < lam <= 4:
        raise CliError(f"--lambda must be in (0, 4], got {lam}")
    try:
        image = load_image(args.image)
        flow, mask = load_flow(args.flow)
        result = rectify_scaled(image, flow, mask, lam)
    except FlowFormatError as e:
        raise CliError(f"{args.flow}: {e}") from e
    except (OSError, ValueError) as e:
        raise CliError(str(e)) from e
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rgb = result.image.data.copy()
    rgb[~result.coverage] = 1.0
    save_image(out, ImageRaster(rgb, result.image.color_space), alpha=result.coverage.astype(float))
    h, w = result.coverage.shape
    side = {"canvas_w": w, "canvas_h": h, "translation": list(result.translation),
            "lambda": lam, "n_clamped": int(result.n_clamped)}
    out.with_suffix(".json").write_text(json.dumps(side, indent=2) + "\n")
    if args.compare:
        panels = [_rgb(image.data), _rgb(rgb)]
        if args.reference:
            panels.append(_rgb(load_image(args.reference).data))
        save_image(out.with_name(out.stem + "_compare.png"), ImageRaster(_side_by_side(panels)))
    return 0


def _rgb(a):
    return np.repeat(a, 3, axis=2) if a.shape[2] == 1 else a


def _paste_with_sidecar(path: Path, shape):
    """Composite a rectified RGBA output onto a white canvas of ``shape``."""
    from .flow_core import ImageRaster, load_image

    img = load_image(path, background=1.0)
    side = path.with_suffix(".json")
    if not side.exists():
        return img
    meta = json.loads(side.read_text())
    tx, ty = meta["translation"]
    h, w = shape
    canvas = np.ones((h, w, img.channels))
    rh, rw = img.shape
    r0, c0 = max(0, ty), max(0, tx)
    r1, c1 = min(h, ty + rh), min(w, tx + rw)
    if r1 > r0 and c1 > c0:
        canvas[r0:r1, c0:c1] = img.data[r0 - ty:r1 - ty, c0 - tx:c1 - tx]
    return ImageRaster(canvas, img.color_space)


def _read_manifest(path: Path) -> list[dict]:
    try:
        raw = json.loads(path.read_text())
    except (OSError, ValueError) as e:
        raise CliError(f"cannot read manifest {path}: {e}") from e
    pairs = raw.get("pairs", []) if isinstance(raw, dict) else raw
    if not isinstance(pairs, list):
        raise CliError("manifest must be a list of pairs or {'pairs': [...]}")
    return pairs


def cmd_eval(args) -> int:
    from .flow_core import load_image
    from .metrics import evaluate_pair

    manifest = Path(args.manifest)
    pairs = _read_manifest(manifest)
    out = Path(args.out)
    (out / "pairs").mkdir(parents=True, exist_ok=True)
    rows, n_failed = [], 0
    for i, pair in enumerate(pairs):
        name = str(pair.get("name", i)) if isinstance(pair, dict) else str(i)
        record = {"name": name}
        try:
            if not isinstance(pair, dict) or "rectified" not in pair or "reference" not in pair:
                raise ValueError("pair needs 'rectified' and 'reference'")
            rect_path = manifest.parent / pair["rectified"]
            ref = load_image(manifest.parent / pair["reference"])
            rect = _paste_with_sidecar(rect_path, ref.shape)
            report = evaluate_pair(rect, ref)
            record.update(method=pair.get("method", "dewarpflow"), **report.as_dict())
            rows.append(record)
        except (OSError, ValueError) as e:
            record["error"] = f"{type(e).__name__}: {e}"
            n_failed += 1
            log.warning("pair %s failed: %s", name, e)
        (out / "pairs" / f"{i:04d}_{name}.json").write_text(json.dumps(record, indent=2) + "\n")
    with open(out / "results.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([*EVAL_COLUMNS, "Pair"])
        for r in rows:
            w.writerow([r["method"], repr(r["ms_ssim"]), repr(r["ld"]), r["name"]])
    with open(out / "table.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(EVAL_COLUMNS)
        for method in dict.fromkeys(r["method"] for r in rows):
            sel = [r for r in rows if r["method"] == method]
            w.writerow([method, f"{np.mean([r['ms_ssim'] for r in sel]):.4f}",
                        f"{np.mean([r['ld'] for r in sel]):.2f}"])
    if pairs and n_failed == len(pairs):
        print(f"error: all {n_failed} pairs failed", file=sys.stderr)
        return 1
    return 0


def cmd_check(args) -> int:
    from .checks import run_suites

    results = run_suites(args.suite, seed=args.seed or 0, inject=args.inject)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(json.dumps({"suite": r.suite, "loss": r.loss, "max_rel_err": r.max_rel_err,
                          "n_coords": r.n_coords, "passed": r.passed}))
    for r in failed:
        print(f"FAIL {r.suite}/{r.loss}: {r.max_rel_err:.3g} >= {r.tol:.3g}", file=sys.stderr)
    return 1 if failed else 0


# ---- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dewarpflow", description="Document dewarping by displacement flow.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.lr=1e-3")
        sp.add_argument("--seed", type=int, help="global seed (overrides the config)")

    sp = sub.add_parser("synth", help="write a synthetic dataset")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--h", type=int)
    sp.add_argument("--w", type=int)
    sp.add_argument("--perturbs", type=int)
    with_config(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train the flow network")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--resume", nargs="?", const="auto",
                    help="continue from a checkpoint (default: the one in --out)")
    sp.add_argument("--max-iterations", type=int)
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="write predicted flows (.dfl) for images")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True, nargs="+")
    sp.add_argument("--out", required=True, help=".dfl file, or a directory for several images")
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("rectify", help="remap an image with a flow, optionally zoomed")
    sp.add_argument("--image", required=True)
    sp.add_argument("--flow", required=True)
    sp.add_argument("--lambda", dest="lam", type=float, default=1.0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--compare", action="store_true", help="also write distorted | rectified | reference")
    sp.add_argument("--reference", help="reference image for the comparison panel")
    sp.set_defaults(func=cmd_rectify)

    sp = sub.add_parser("eval", help="MS-SSIM and LD for (rectified, reference) pairs")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("check", help="gradient, LSC identity and triangulation self-checks")
    sp.add_argument("--suite", choices=["grad", "lsc", "tri", "all"], default="all")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--inject", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
