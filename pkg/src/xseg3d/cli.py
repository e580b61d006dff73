"""Command-line driver: ``xseg3d <subcommand> [flags]``.

Every subcommand takes ``--out DIR``. Before doing any work it writes the
fully resolved configuration to ``DIR/config.resolved.ini``; afterwards it
appends one JSON line to ``DIR/manifest.jsonl`` with the inputs, the config
hash, the seed and a sha256 of every file it wrote.

Configuration is an INI file (``--config``) or a shipped preset
(``--preset desk``), layered over the built-in defaults and then over
``--set section.key=value`` overrides. Unknown sections or keys are errors.
The environment variable ``XSEG3D_SEED`` replaces ``[run] seed``.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import io
import json
import os
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import container
from .data import (
    AugmentationConfig,
    ScanInfo,
    annotated_fraction,
    generate_synthetic,
    ingest,
    load_volume,
    preprocess,
    read_manifest,
    save_volume,
    stratified_group_kfold,
)
from .data.folds import FoldAssignment
from .data.volume import parse_slice_id
from .errors import ConfigError, XSegError
from .metrics import evaluate_masks, soft_dice_terms, write_metrics_csv
from .rng import Rng
from .tensor import Tensor
from .training.inference import EnsembleSpec, ensemble_probabilities, sliding_window_predict, threshold
from .training.loop import TrainConfig, finetune, split_volumes, train_fold, write_history
from .unet import CLASS_NAMES, UNetConfig
from .unet import load as load_checkpoint
from .unet import save as save_checkpoint

PRESETS = ("desk",)

# Built-in defaults; the [train] values are the full-scale schedule.
DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"seed": "0"},
    "data": {
        "synthetic_cases": "8",
        "synthetic_shape": "24,32,32",
        "synthetic_volumes": "0",
        "days_per_case": "1,1",
        "slice_order": "C",
        "threshold_fraction": "0.05",
        "margin_voxels": "2",
        "percentile": "99.5",
    },
    "split": {"k": "5", "n_bins": "4"},
    "model": {
        "levels": "5",
        "channels": "32,64,128,256,512",
        "down_strides": "2x2x2,2x2x2,2x2x2,2x2x2",
        "dropout": "0.2",
        "prelu_init": "0.25",
        "head_prior": "0.05",
    },
    "train": {
        "batch_size": "4",
        "epochs_run1": "120",
        "epochs_run2": "40",
        "lr_init_run1": "5e-4",
        "lr_init_run2": "3e-4",
        "lr_min": "1e-4",
        "patch_size": "160,160,80",
        "loss": "dice",
        "weight_decay": "1e-2",
        "warmup_fraction": "0.3",
        "div_factor": "25",
        "patches_per_volume": "1",
        "validate_every": "1",
        "val_overlap": "0.5",
        "augment": "true",
    },
    "explain": {"method": "gradcam", "layer": "bottleneck", "class": "0"},
    "render": {"axis": "0", "alpha": "0.6", "zoom": "4"},
}


# ------------------------------------------------------------------ config


def _ints(s: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in s.replace(" ", "").split(",") if v)
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {s!r}") from None


class RunConfig:
    """Resolved sectioned configuration with typed accessors."""

    def __init__(self, parser: configparser.ConfigParser):
        self.parser = parser

    @classmethod
    def resolve(cls, path=None, preset=None, overrides=(), env=None) -> "RunConfig":
        env = os.environ if env is None else env
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_dict(DEFAULTS)
        layers = []
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}; available: {', '.join(PRESETS)}")
            layers.append((f"preset {preset}", resources.files("xseg3d.presets").joinpath(f"{preset}.ini").read_text()))
        if path is not None:
            layers.append((str(path), Path(path).read_text()))
        for label, text in layers:
            layer = configparser.ConfigParser(interpolation=None)
            try:
                layer.read_string(text, source=label)
            except configparser.Error as exc:
                raise ConfigError(f"{label}: {exc}".replace("\n", " ")) from None
            for sec in layer.sections():
                for key, val in layer[sec].items():
                    cls._set(cp, sec, key, val, label)
        for item in overrides:
            name, sep, val = item.partition("=")
            sec, dot, key = name.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {item!r} is not section.key=value")
            cls._set(cp, sec, key, val.strip(), "--set")
        if env.get("XSEG3D_SEED"):
            cls._set(cp, "run", "seed", env["XSEG3D_SEED"], "XSEG3D_SEED")
        cfg = cls(cp)
        cfg.check()
        return cfg

    def check(self) -> None:
        """Parse every typed section once so bad values fail before any work."""
        self.model_config()
        self.train_config()
        for sec, key in (("split", "k"), ("split", "n_bins"), ("render", "axis"), ("render", "zoom"), ("explain", "class")):
            self.getint(sec, key)
        self.getfloat("render", "alpha")

    @staticmethod
    def _set(cp, sec, key, val, label):
        if sec not in DEFAULTS:
            raise ConfigError(f"{label}: unknown section [{sec}]")
        if key not in DEFAULTS[sec]:
            raise ConfigError(f"{label}: unknown key {key!r} in [{sec}]")
        cp[sec][key] = val

    def get(self, sec, key) -> str:
        return self.parser[sec][key]

    def getint(self, sec, key) -> int:
        try:
            return self.parser.getint(sec, key)
        except ValueError:
            raise ConfigError(f"[{sec}] {key} must be an integer") from None

    def getfloat(self, sec, key) -> float:
        try:
            return self.parser.getfloat(sec, key)
        except ValueError:
            raise ConfigError(f"[{sec}] {key} must be a number") from None

    def getbool(self, sec, key) -> bool:
        try:
            return self.parser.getboolean(sec, key)
        except ValueError:
            raise ConfigError(f"[{sec}] {key} must be a boolean") from None

    @property
    def seed(self) -> int:
        return self.getint("run", "seed")

    def text(self) -> str:
        buf = io.StringIO()
        self.parser.write(buf)
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.text().encode()).hexdigest()

    def model_config(self) -> UNetConfig:
        strides = []
        for tok in self.get("model", "down_strides").split(","):
            tok = tok.strip()
            if tok:
                strides.append(_ints(tok.replace("x", ",")))
        return UNetConfig(
            levels=self.getint("model", "levels"),
            channels_per_level=_ints(self.get("model", "channels")),
            down_strides=tuple(strides),
            dropout_p=self.getfloat("model", "dropout"),
            prelu_init=self.getfloat("model", "prelu_init"),
            head_prior=self.getfloat("model", "head_prior"),
        )

    def train_config(self) -> TrainConfig:
        f, i = self.getfloat, self.getint
        aug = AugmentationConfig() if self.getbool("train", "augment") else AugmentationConfig.disabled()
        return TrainConfig(
            batch_size=i("train", "batch_size"),
            epochs_run1=i("train", "epochs_run1"),
            epochs_run2=i("train", "epochs_run2"),
            lr_init_run1=f("train", "lr_init_run1"),
            lr_init_run2=f("train", "lr_init_run2"),
            lr_min=f("train", "lr_min"),
            patch_size=_ints(self.get("train", "patch_size")),
            loss=self.get("train", "loss"),
            seed=self.seed,
            weight_decay=f("train", "weight_decay"),
            warmup_fraction=f("train", "warmup_fraction"),
            div_factor=f("train", "div_factor"),
            patches_per_volume=i("train", "patches_per_volume"),
            validate_every=i("train", "validate_every"),
            val_overlap=f("train", "val_overlap"),
            augmentation=aug,
        )


# ------------------------------------------------------------------ run bookkeeping


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Run:
    """Output directory guard: lock file, resolved-config echo, manifest line."""

    def __init__(self, command: str, out: Path, cfg: RunConfig, inputs: dict):
        self.command = command
        self.out = out
        self.cfg = cfg
        self.inputs = inputs
        self.outputs: list[Path] = []
        self.summary: dict = {}
        self._lock = out / ".xseg3d.lock"

    def __enter__(self):
        self.out.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self._lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise XSegError(f"output directory {self.out} is locked by another run ({self._lock.name} exists)") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        (self.out / "config.resolved.ini").write_text(self.cfg.text())
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                rec = {
                    "command": self.command,
                    "config_sha256": self.cfg.digest(),
                    "seed": self.cfg.seed,
                    "inputs": self.inputs,
                    "outputs": {str(p.relative_to(self.out)): sha256_file(p) for p in sorted(set(self.outputs))},
                    "summary": self.summary,
                }
                with open(self.out / "manifest.jsonl", "a") as fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
        finally:
            self._lock.unlink(missing_ok=True)
        return False

    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(p)
        return p


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


# ------------------------------------------------------------------ data helpers


def _load_volumes(data_dir) -> list:
    vdir = Path(data_dir) / "volumes"
    files = sorted(vdir.glob("*.xvol"))
    if not files:
        raise XSegError(f"no volume containers under {vdir}; run 'ingest' first")
    return [load_volume(f) for f in files]


def _pick_volume(vols, key):
    if key is None:
        return vols[0]
    for v in vols:
        if v.key == key:
            return v
    raise XSegError(f"volume {key!r} not found; available: {', '.join(v.key for v in vols)}")


def _scan_infos_from_manifest(path) -> list[ScanInfo]:
    labelled: dict[tuple[str, int], dict[int, bool]] = {}
    for row in read_manifest(path):
        case, day, sl = parse_slice_id(row["id"])
        slot = labelled.setdefault((case, day), {})
        slot[sl] = slot.get(sl, False) or bool(row.get("segmentation"))
    return [ScanInfo(c, d, float(np.mean(list(s.values())))) for (c, d), s in sorted(labelled.items())]


def _save_prediction(path, v, probs, mask, meta_extra=None):
    meta = {"kind": "prediction", "case_id": v.case_id, "day": v.day, **(meta_extra or {})}
    container.save(path, {"probs": probs.astype(np.float32), "mask": mask}, meta)


# ------------------------------------------------------------------ subcommands


def cmd_synth(args, cfg: RunConfig, run: Run):
    shape = _ints(cfg.get("data", "synthetic_shape"))
    n_vol = cfg.getint("data", "synthetic_volumes") or None
    ds = generate_synthetic(
        cfg.getint("data", "synthetic_cases"),
        shape,
        Rng(cfg.seed).split("synthetic"),
        days_per_case=_ints(cfg.get("data", "days_per_case")),
        n_volumes=n_vol,
    )
    images, manifest = ds.write(run.out)
    run.outputs += sorted(images.glob("*.png")) + [manifest]
    run.summary = {"volumes": len(ds.volumes), "cases": len({v.case_id for v in ds.volumes})}


def cmd_ingest(args, cfg: RunConfig, run: Run):
    data = Path(args.data)
    vols = ingest(data / "images", data / "train.csv", order=cfg.get("data", "slice_order"))
    for v in vols:
        pv = preprocess(
            v,
            cfg.getfloat("data", "threshold_fraction"),
            cfg.getint("data", "margin_voxels"),
            cfg.getfloat("data", "percentile"),
        )
        save_volume(pv, run.path("volumes", f"{pv.key}.xvol"))
    run.summary = {"volumes": len(vols)}


def cmd_split(args, cfg: RunConfig, run: Run):
    data = Path(args.data)
    if (data / "volumes").is_dir():
        infos = [ScanInfo(v.case_id, v.day, annotated_fraction(v)) for v in _load_volumes(data)]
    elif (data / "train.csv").is_file():
        infos = _scan_infos_from_manifest(data / "train.csv")
    else:
        raise XSegError(f"{data} holds neither volumes/ nor train.csv")
    k = args.k if args.k is not None else cfg.getint("split", "k")
    folds = stratified_group_kfold(infos, k, Rng(cfg.seed).split("folds"), cfg.getint("split", "n_bins"))
    folds.to_csv(run.path("folds.csv"))
    counts = folds.fold_scan_counts()
    total = sum(counts)
    with open(run.path("fold_sizes.csv"), "w") as fh:
        fh.write("fold,train_volumes,val_volumes\n")
        for f, n in enumerate(counts):
            fh.write(f"{f},{total - n},{n}\n")
    run.summary = {"k": k, "val_volumes": counts}


def _fold_data(args, cfg):
    vols = _load_volumes(args.data)
    folds = FoldAssignment.from_csv(args.folds)
    return split_volumes(vols, folds, args.fold), folds, vols


def _train_eval(model, vols, patch):
    per = [
        soft_dice_terms(Tensor(sliding_window_predict(model, v.image, patch)[None]), v.mask[None], 1e-5).data[0]
        for v in vols
    ]
    return float(np.mean(per))


def _write_result(run, res, train, patch, tag=""):
    save_checkpoint(res.best, run.path(f"best{tag}.ckpt"))
    save_checkpoint(res.final, run.path(f"final{tag}.ckpt"))
    write_history(run.path(f"history{tag}.csv"), res.history)
    last = res.history[-1] if res.history else {}
    run.summary = {
        "epochs": len(res.history),
        "final_val_composite": last.get("val_composite"),
        "best_val_composite": res.best.extra.get("val_composite"),
        "final_train_soft_dsc": _train_eval(res.final.to_model(), train, patch),
    }
    with open(run.path(f"summary{tag}.json"), "w") as fh:
        json.dump(run.summary, fh, sort_keys=True, indent=1)


def cmd_train(args, cfg: RunConfig, run: Run):
    (train, val), folds, vols = _fold_data(args, cfg)
    tc = cfg.train_config()
    t0 = time.perf_counter()
    res = train_fold(args.fold, folds, vols, tc, Rng(cfg.seed).split("fold", args.fold), cfg.model_config())
    _log(f"fold {args.fold}: {len(res.history)} epochs in {time.perf_counter() - t0:.1f}s")
    _write_result(run, res, train, tc.patch_size)


def cmd_finetune(args, cfg: RunConfig, run: Run):
    (train, val), _, _ = _fold_data(args, cfg)
    ck = load_checkpoint(args.checkpoint)
    tc = cfg.train_config()
    res = finetune(ck, tc, train, val, Rng(cfg.seed).split("finetune", args.fold))
    _write_result(run, res, train, tc.patch_size, tag="_finetuned")


def _targets(args):
    vols = _load_volumes(args.data)
    if args.fold is not None:
        if not args.folds:
            raise XSegError("--fold needs --folds")
        folds = FoldAssignment.from_csv(args.folds)
        vols = split_volumes(vols, folds, args.fold)[1]
    if args.volume:
        vols = [_pick_volume(vols, args.volume)]
    return vols


def cmd_predict(args, cfg: RunConfig, run: Run):
    ck = load_checkpoint(args.checkpoint[0])
    model = ck.to_model()
    patch = cfg.train_config().patch_size
    overlap = cfg.getfloat("train", "val_overlap")
    for v in _targets(args):
        probs = sliding_window_predict(model, v.image, patch, overlap)
        _save_prediction(run.path("predictions", f"{v.key}.xpred"), v, probs, threshold(probs))


def cmd_ensemble(args, cfg: RunConfig, run: Run):
    spec = EnsembleSpec([load_checkpoint(p) for p in args.checkpoint])
    patch = cfg.train_config().patch_size
    overlap = cfg.getfloat("train", "val_overlap")
    for v in _targets(args):
        probs = ensemble_probabilities(spec, v.image, patch, overlap)
        _save_prediction(
            run.path("predictions", f"{v.key}.xpred"), v, probs, threshold(probs, spec.threshold),
            {"members": len(spec.checkpoints)},
        )
    run.summary = {"members": len(spec.checkpoints)}


def cmd_evaluate(args, cfg: RunConfig, run: Run):
    vols = {v.key: v for v in _load_volumes(args.data)}
    pred_dir = Path(args.pred)
    files = sorted(pred_dir.glob("*.xpred")) or sorted((pred_dir / "predictions").glob("*.xpred"))
    if not files:
        raise XSegError(f"no prediction containers under {pred_dir}")
    items = []
    for f in files:
        tensors, meta = container.load(f)
        key = f"{meta['case_id']}_day{meta['day']}"
        if key not in vols:
            raise XSegError(f"prediction {f.name} has no matching volume")
        v = vols[key]
        items.append((v.case_id, v.day, evaluate_masks(tensors["mask"].astype(bool), v.mask, spacing=v.spacing)))
    run.summary = write_metrics_csv(run.path("metrics.csv"), items)


def _padded(image, mult):
    spatial = image.shape[1:]
    target = [((n + m - 1) // m) * m for n, m in zip(spatial, mult)]
    pad = [(0, 0)] + [(0, t - n) for n, t in zip(spatial, target)]
    return np.pad(image, pad), spatial


def cmd_explain(args, cfg: RunConfig, run: Run):
    from . import xai

    ck = load_checkpoint(args.checkpoint[0])
    model = ck.to_model()
    v = _pick_volume(_load_volumes(args.data), args.volume)
    method = args.method or cfg.get("explain", "method")
    layer = args.layer or cfg.get("explain", "layer")
    class_id = args.class_id if args.class_id is not None else cfg.getint("explain", "class")
    if not 0 <= class_id < len(CLASS_NAMES):
        raise XSegError(f"class {class_id} outside [0, {len(CLASS_NAMES)})")
    x, spatial = _padded(v.image, model.config.required_multiple())
    m = xai.explain(method, model, x, class_id, layer=layer)
    m.values = np.ascontiguousarray(m.values[tuple(slice(0, n) for n in spatial)])
    name = f"{v.key}_{method}_c{class_id}.xattr"
    digest = xai.save_attribution(m, run.path("attributions", name), sidecar=run.out / "attributions.jsonl")
    run.outputs.append(run.out / "attributions.jsonl")
    run.summary = {"method": method, "class_id": class_id, "layer": m.layer, "pixels": m.pixel_count, "sha256": digest}
    if method == "deeplift":
        run.summary["completeness_rel_err"] = xai.completeness_error(m)


def cmd_render(args, cfg: RunConfig, run: Run):
    from . import xai

    m = xai.load_attribution(args.attribution)
    v = _pick_volume(_load_volumes(args.data), args.volume)
    axis = args.axis if args.axis is not None else cfg.getint("render", "axis")
    index = args.index if args.index is not None else v.shape[axis] // 2
    out = run.path(args.name or f"{Path(args.attribution).stem}_a{axis}_s{index}.png")
    xai.render_overlay(
        m, v.image, axis, index, out,
        alpha=cfg.getfloat("render", "alpha"),
        mask=v.mask if args.with_mask else None,
        zoom=cfg.getint("render", "zoom"),
    )


COMMANDS = {
    "synth": (cmd_synth, "generate the synthetic dataset (PNG slices + RLE manifest)"),
    "ingest": (cmd_ingest, "assemble, crop and normalize volumes into containers"),
    "split": (cmd_split, "stratified group k-fold assignment"),
    "train": (cmd_train, "first training run of one fold"),
    "finetune": (cmd_finetune, "second run from a checkpoint at the lower peak rate"),
    "predict": (cmd_predict, "sliding-window prediction with one checkpoint"),
    "ensemble": (cmd_ensemble, "mean-probability ensemble of several checkpoints"),
    "evaluate": (cmd_evaluate, "DSC / Hausdorff / composite report"),
    "explain": (cmd_explain, "attribution map for one volume and class"),
    "render": (cmd_render, "PNG overlay of an attribution slice"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xseg3d", description="Explainable 3D UNet segmentation pipeline.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_, description=help_)
        src = sp.add_mutually_exclusive_group()
        src.add_argument("--config", help="INI configuration file")
        src.add_argument("--preset", choices=PRESETS, help="shipped configuration")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override one key")
        sp.add_argument("--out", required=True, help="output directory")
        if name != "synth":
            sp.add_argument("--data", required=True, help="dataset directory (synth or ingest output)")
        if name == "split":
            sp.add_argument("--k", type=int, help="number of folds")
        if name in ("train", "finetune"):
            sp.add_argument("--folds", required=True, help="folds.csv from 'split'")
            sp.add_argument("--fold", type=int, required=True)
        if name in ("predict", "ensemble"):
            sp.add_argument("--folds", help="folds.csv; with --fold restricts to that fold's validation volumes")
            sp.add_argument("--fold", type=int)
        if name == "finetune":
            sp.add_argument("--checkpoint", required=True)
        if name in ("predict", "explain"):
            sp.add_argument("--checkpoint", required=True, nargs=1)
        if name == "ensemble":
            sp.add_argument("--checkpoint", required=True, nargs="+")
        if name in ("predict", "ensemble", "explain", "render"):
            sp.add_argument("--volume", help="volume key such as case101_day7 (default: all, or the first for explain/render)")
        if name == "evaluate":
            sp.add_argument("--pred", required=True, help="directory of .xpred containers")
        if name == "explain":
            sp.add_argument("--method", choices=("gradcam", "guided_backprop", "guided_gradcam", "deeplift"))
            sp.add_argument("--layer")
            sp.add_argument("--class", dest="class_id", type=int)
        if name == "render":
            sp.add_argument("--attribution", required=True, help=".xattr file from 'explain'")
            sp.add_argument("--axis", type=int, choices=(0, 1, 2))
            sp.add_argument("--index", type=int)
            sp.add_argument("--with-mask", action="store_true", help="add a ground-truth panel")
            sp.add_argument("--name", help="PNG file name inside --out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = RunConfig.resolve(args.config, args.preset, args.set)
        inputs = {k: v for k, v in sorted(vars(args).items()) if k not in ("command", "set", "out") and v is not None}
        inputs["overrides"] = list(args.set)
        handler = COMMANDS[args.command][0]
        with Run(args.command, Path(args.out), cfg, inputs) as run:
            handler(args, cfg, run)
    except (XSegError, ValueError, OSError, KeyError) as exc:
        msg = " ".join(str(exc).split())
        print(f"xseg3d {args.command}: error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
