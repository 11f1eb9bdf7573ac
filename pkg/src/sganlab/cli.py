"""``sganlab`` command line: corpus generation, training, sampling, editing,
evaluation and the tabular check.

Exit codes: 0 success, 2 usage or input error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
RESOLVED = "config.resolved.json"
REPORT = "report.json"

logger = logging.getLogger("sganlab")


class UsageError(Exception):
    pass


# -- configuration ----------------------------------------------------------------

def load_config_file(path) -> dict:
    """JSON or TOML, chosen by extension."""
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} does not exist")
    text = path.read_bytes()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        return tomllib.loads(text.decode())
    if path.suffix.lower() == ".json":
        return json.loads(text)
    raise UsageError(f"config file must end in .json or .toml, got {path.name}")


def _flags_given(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if v is not None and not k.startswith("_")}


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags; the seed falls back to $SGANLAB_SEED."""
    cfg = dict(defaults)
    file_cfg = load_config_file(args.config) if getattr(args, "config", None) else {}
    if file_cfg.get("command") not in (None, args._command):
        raise UsageError(f"config was written for {file_cfg['command']!r}, not {args._command!r}")
    file_cfg.pop("command", None)
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config key(s) for {args._command}: {sorted(unknown)}")
    cfg.update(file_cfg)
    flags = _flags_given(args)
    flags.pop("config", None)
    cfg.update({k: v for k, v in flags.items() if k in defaults})
    if cfg.get("seed") is None:
        env = os.environ.get("SGANLAB_SEED")
        try:
            cfg["seed"] = int(env) if env is not None else 0
        except ValueError:
            raise UsageError(f"SGANLAB_SEED must be an integer, got {env!r}") from None
    if cfg.get("out") is None:
        raise UsageError("an output directory is required (-o/--out)")
    return cfg


class OutputDir:
    """Creates the output directory, holds its lockfile and records the resolved config."""

    def __init__(self, path, command: str, cfg: dict):
        from filelock import FileLock, Timeout

        self.path = Path(path)
        if not self.path.parent.exists():
            raise UsageError(f"parent of output directory {self.path} does not exist")
        self.path.mkdir(exist_ok=True)
        self._lock = FileLock(str(self.path / ".sganlab.lock"))
        try:
            self._lock.acquire(timeout=0)
        except Timeout:
            raise UsageError(f"{self.path} is in use by another sganlab process") from None
        record = {"command": command, **{k: v for k, v in cfg.items() if k != "out"}}
        (self.path / RESOLVED).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self._lock.release()
        return False

    def write_report(self, payload: dict) -> Path:
        p = self.path / REPORT
        p.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")
        return p


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _sizes(text: str) -> list[int]:
    """``100:5000`` (step = start), ``100:5000:200`` or ``100,200,400``."""
    try:
        if ":" in text:
            parts = [int(p) for p in text.split(":")]
            if len(parts) == 2:
                parts.append(parts[0])
            start, stop, step = parts
            if step <= 0 or start < 2 or stop < start:
                raise ValueError
            return list(range(start, stop + 1, step))
        out = [int(p) for p in text.split(",")]
        if out != sorted(out) or out[0] < 2:
            raise ValueError
        return out
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}") from None


# -- plotting ------------------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "sganlab"
    return plt


def save_figure(fig, stem: Path) -> list[str]:
    out = []
    for ext, meta in (("png", {"Software": None}), ("svg", {"Date": None})):
        fig.savefig(f"{stem}.{ext}", metadata=meta)
        out.append(f"{stem}.{ext}")
    return out


def write_csv(path: Path, header, rows) -> str:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return str(path)


# -- commands ----------------------------------------------------------------------

CORPUS_DEFAULTS = {"sections": 4, "size": 256, "seed": None, "cell_diameter": 24.0, "mito_density": 0.05,
                   "noise_sigma": 0.18, "out": None}


def cmd_make_corpus(args) -> int:
    from .dataform import CorpusConfig, make_synthetic_corpus, save_stack

    cfg = resolve(args, CORPUS_DEFAULTS)
    if cfg["sections"] < 1 or cfg["size"] < 8:
        raise UsageError("need at least 1 section of at least 8x8 pixels")
    with OutputDir(cfg["out"], "make-corpus", cfg) as out:
        corpus = CorpusConfig(sections=cfg["sections"], height=cfg["size"], width=cfg["size"],
                              cell_diameter=cfg["cell_diameter"], mito_density=cfg["mito_density"],
                              noise_sigma=cfg["noise_sigma"])
        stack = make_synthetic_corpus(corpus, seed=cfg["seed"])
        save_stack(stack, out.path)
        (out.path / "truth.json").write_text(json.dumps(stack.truth, indent=2, sort_keys=True,
                                                        default=_json_default) + "\n")
        out.write_report({"sections": len(stack), "shape": list(stack.shape),
                          "mito_count": stack.truth["mito_count"],
                          "interior_cells": stack.truth["interior_cells"]})
    return EXIT_OK


def _train_defaults() -> dict:
    from .trainer import TrainConfig

    d = TrainConfig().to_dict()
    d.update(seed=None, data=None, resume=None, out=None)
    return d


def cmd_train(args) -> int:
    from .dataform import load_stack
    from .trainer import TrainConfig, TrainingDiverged, train

    cfg = resolve(args, _train_defaults())
    if cfg["data"] is None:
        raise UsageError("--data is required")
    stack = load_stack(cfg["data"])
    tcfg = TrainConfig.from_dict({k: v for k, v in cfg.items() if k not in ("data", "resume", "out")})
    with OutputDir(cfg["out"], "train", cfg) as out:
        try:
            _, report = train(tcfg, stack, out_dir=out.path, resume=cfg["resume"])
        except TrainingDiverged as err:
            print(f"error: {err}; diagnostic dump: {err.dump_path}", file=sys.stderr)
            out.write_report({"status": "diverged", "dump": err.dump_path})
            return EXIT_NUMERIC
        out.write_report({"status": "ok", "variant": tcfg.variant, "start_step": report.start_step,
                          "final_step": report.final_step, "step_order": report.step_order,
                          "components": sorted(report.component_names()),
                          "checkpoints": [os.path.basename(c) for c in report.checkpoints]})
    logger.info("trained %d steps in %.1fs", report.final_step - report.start_step, report.elapsed_s)
    return EXIT_OK


SAMPLE_DEFAULTS = {"ckpt": None, "count": 4, "noise_size": [2, 2], "seed": None, "edit": False,
                   "mito_policy": "remove_concave", "out": None}


def cmd_sample(args) -> int:
    from .dataform import SectionStack, save_stack
    from .labelops import EditPolicy
    from .trainer import Checkpoint, sample_pipeline

    cfg = resolve(args, SAMPLE_DEFAULTS)
    if cfg["ckpt"] is None:
        raise UsageError("--ckpt is required")
    ckpt = Checkpoint.load(cfg["ckpt"], with_optimizers=False)
    policy = EditPolicy(mito_policy=cfg["mito_policy"]) if cfg["edit"] else None
    with OutputDir(cfg["out"], "sample", cfg) as out:
        pairs = sample_pipeline(ckpt, tuple(cfg["noise_size"]), cfg["count"], cfg["seed"], edit=policy)
        stack = SectionStack(np.stack([x for _, x in pairs]), np.stack([y for y, _ in pairs]),
                             source=f"sample:{cfg['seed']}")
        save_stack(stack, out.path)
        out.write_report({"count": len(pairs), "shape": list(stack.shape), "edited": bool(cfg["edit"]),
                          "class_fractions": (np.bincount(stack.labels.ravel(), minlength=3)
                                              / stack.labels.size).tolist()})
    return EXIT_OK


EDIT_DEFAULTS = {"labels": None, "membrane_prune": True, "mito_policy": "remove_concave",
                 "solidity_threshold": 0.9, "seed": None, "out": None}


def cmd_edit(args) -> int:
    from .dataform import load_stack, save_stack
    from .labelops import EditPolicy, edit_labels

    cfg = resolve(args, EDIT_DEFAULTS)
    if cfg["labels"] is None:
        raise UsageError("--labels is required")
    stack = load_stack(cfg["labels"])
    policy = EditPolicy(cfg["membrane_prune"], cfg["mito_policy"], cfg["solidity_threshold"])
    with OutputDir(cfg["out"], "edit", cfg) as out:
        edited = np.stack([edit_labels(l, policy) for l in stack.labels])
        changed = [int(np.count_nonzero(a != b)) for a, b in zip(stack.labels, edited)]
        stack.labels = edited
        save_stack(stack, out.path)
        out.write_report({"sections": len(stack), "changed_pixels": changed})
    return EXIT_OK


EVAL_DEFAULTS = {
    "shape": {"labels": None, "ref": None, "seed": None, "folds": 5, "out": None},
    "stats": {"labels": None, "ref": None, "bins": 20, "seed": None, "out": None},
    "seg": {"segmenter": None, "pairs": None, "fit_on": None, "fit_steps": 400, "seed": None, "out": None},
    "support": {"ckpt": None, "sizes": None, "runs": 10, "threshold": 0.9, "noise_size": [2, 2],
                "full_sweep": False, "seed": None, "out": None},
    "grad-attn": {"ckpt": None, "pairs": None, "seed": None, "out": None},
}


def _cells(stack):
    from .labelops import extract_cells
    return [c for lab in stack.labels for c in extract_cells(lab)]


def _eval_shape(cfg, out):
    from .dataform import load_stack
    from .metrics import export_features, fool_rate, shape_features

    gen = load_stack(cfg["labels"])
    feats = [shape_features(c, gen.resolution) for c in _cells(gen)]
    report = {"cells": len(feats)}
    vectors, tags = list(feats), ["generated"] * len(feats)
    if cfg["ref"]:
        ref = load_stack(cfg["ref"])
        ref_feats = [shape_features(c, ref.resolution) for c in _cells(ref)]
        vectors += ref_feats
        tags += ["reference"] * len(ref_feats)
        report["reference_cells"] = len(ref_feats)
        try:
            report["fool_rate_percent"] = fool_rate(np.array(ref_feats), np.array(feats), folds=cfg["folds"],
                                                    seed=cfg["seed"])
        except ValueError as err:
            report["fool_rate_percent"] = None
            report["fool_rate_note"] = str(err)
    if vectors:
        export_features(np.array(vectors), out.path / "features.csv", tags)
    return report


def _eval_stats(cfg, out):
    from .dataform import load_stack
    from .metrics import chi_squared_table, global_stats
    from .metrics.stats import STAT_COLUMNS

    if cfg["ref"] is None:
        raise UsageError("eval stats needs --ref")
    gen, ref = load_stack(cfg["labels"]), load_stack(cfg["ref"])
    gs = global_stats(gen.labels, gen.resolution, cfg["bins"])
    rs = global_stats(ref.labels, ref.resolution, cfg["bins"])
    table = chi_squared_table(rs, gs)
    plt = _pyplot()
    fig, axes = plt.subplots(1, 3, figsize=(11, 3.2))
    rows = []
    for ax, col in zip(axes, STAT_COLUMNS):
        edges = rs.edges[col]
        h_ref, _ = rs.histogram(col, edges)
        h_gen, _ = gs.histogram(col, edges)
        centers = 0.5 * (edges[1:] + edges[:-1])
        width = edges[1] - edges[0]
        ax.bar(centers, h_ref, width=width, alpha=0.5, label="reference")
        ax.bar(centers, h_gen, width=width, alpha=0.5, label="generated")
        ax.set_title(f"{col} (chi2 {table[col]:.3f})")
        rows += [(col, lo, hi, a, b) for lo, hi, a, b in zip(edges[:-1], edges[1:], h_ref, h_gen)]
    axes[0].legend()
    fig.tight_layout()
    plots = save_figure(fig, out.path / "stats_histograms")
    plt.close(fig)
    write_csv(out.path / "stats_histograms.csv", ["column", "bin_lo", "bin_hi", "reference", "generated"], rows)
    return {"chi_squared": table, "generated": gs.summary(), "reference": rs.summary(),
            "plots": [os.path.basename(p) for p in plots]}


def _segmenter(cfg):
    from .dataform import load_stack
    from .metrics import torch_segmenter
    from .trainer import Checkpoint, train_reconstructor

    if cfg["segmenter"]:
        ckpt = Checkpoint.load(cfg["segmenter"], with_optimizers=False)
        if "F_y" not in ckpt.nets:
            raise UsageError(f"checkpoint of variant {ckpt.config.variant!r} has no reconstructor F_y")
        return torch_segmenter(ckpt.nets["F_y"].eval()), "checkpoint"
    if cfg["fit_on"]:
        net = train_reconstructor(load_stack(cfg["fit_on"]), steps=cfg["fit_steps"], seed=cfg["seed"])
        return torch_segmenter(net), "fitted"
    raise UsageError("eval seg needs --segmenter CKPT or --fit-on DATA")


def _eval_seg(cfg, out):
    from .dataform import load_stack
    from .metrics import seg_eval

    if cfg["pairs"] is None:
        raise UsageError("eval seg needs --pairs")
    seg, source = _segmenter(cfg)
    stack = load_stack(cfg["pairs"])
    rep = seg_eval(seg, list(zip(stack.labels, stack.images)))
    return {"segmenter": source, **rep.to_dict()}


def _eval_support(cfg, out):
    from .metrics import plot_min_distance, support_size
    from .trainer import Checkpoint, sample_pipeline

    if cfg["ckpt"] is None or cfg["sizes"] is None:
        raise UsageError("eval support needs --ckpt and --sizes")
    ckpt = Checkpoint.load(cfg["ckpt"], with_optimizers=False)
    noise = tuple(cfg["noise_size"])
    sizes = cfg["sizes"] if isinstance(cfg["sizes"], list) else _sizes(str(cfg["sizes"]))

    def sampler(seed):
        return sample_pipeline(ckpt, noise, 1, seed)[0][0]

    est = support_size(sampler, sizes, runs=cfg["runs"], threshold=cfg["threshold"], seed=cfg["seed"],
                       early_exit=not cfg["full_sweep"])
    _pyplot()
    plots = plot_min_distance(est, str(out.path / "support_min_distance"))
    (out.path / "support.json").write_text(json.dumps(est.to_dict(), indent=2, sort_keys=True) + "\n")
    return {"support": est.to_dict(), "plots": [os.path.basename(p) for p in plots]}


def _eval_grad_attn(cfg, out):
    from .dataform import load_stack
    from .metrics import gradient_attention, label_share
    from .trainer import Checkpoint

    if cfg["ckpt"] is None or cfg["pairs"] is None:
        raise UsageError("eval grad-attn needs --ckpt and --pairs")
    ckpt = Checkpoint.load(cfg["ckpt"], with_optimizers=False)
    if "D_x" not in ckpt.nets:
        raise UsageError(f"checkpoint of variant {ckpt.config.variant!r} has no pair discriminator D_x")
    stack = load_stack(cfg["pairs"])
    rows = []
    for i, (lab, img) in enumerate(zip(stack.labels, stack.images)):
        a = gradient_attention(ckpt.nets["D_x"], lab, img)
        rows.append((i, a["membrane"], a["mitochondria"], a["image"], label_share(a)))
    write_csv(out.path / "grad_attn.csv", ["pair", "membrane", "mitochondria", "image", "label_share"], rows)
    mean = np.array([r[1:4] for r in rows]).mean(0)
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(["membrane", "mitochondria", "image"], mean)
    ax.set_ylabel("mean |gradient|")
    fig.tight_layout()
    plots = save_figure(fig, out.path / "grad_attn")
    plt.close(fig)
    return {"mean": dict(zip(["membrane", "mitochondria", "image"], mean.tolist())),
            "label_share": float(np.mean([r[4] for r in rows])), "pairs": len(rows),
            "plots": [os.path.basename(p) for p in plots]}


_EVALS = {"shape": _eval_shape, "stats": _eval_stats, "seg": _eval_seg, "support": _eval_support,
          "grad-attn": _eval_grad_attn}


def cmd_eval(args) -> int:
    cfg = resolve(args, EVAL_DEFAULTS[args.mode])
    with OutputDir(cfg["out"], args._command, cfg) as out:
        out.write_report({"mode": args.mode, **_EVALS[args.mode](cfg, out)})
    return EXIT_OK


TABULAR_DEFAULTS = {"problems": 20, "states_y": 4, "states_x": 4, "steps": 3000, "seed": None, "out": None}


def cmd_tabular_verify(args) -> int:
    from .tabular import TabularGANProblem, train_tabular

    cfg = resolve(args, TABULAR_DEFAULTS)
    with OutputDir(cfg["out"], "tabular-verify", cfg) as out:
        runs = []
        for k in range(cfg["problems"]):
            pb = TabularGANProblem.random(cfg["states_y"], cfg["states_x"], seed=cfg["seed"] * 1000 + k)
            res = train_tabular(pb, steps=cfg["steps"])
            runs.append({"problem": k, "converged": res.converged, **res.residuals()})
        write_csv(out.path / "tabular.csv", list(runs[0]), [list(r.values()) for r in runs])
        out.write_report({"problems": len(runs), "converged": sum(r["converged"] for r in runs), "runs": runs})
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="JSON or TOML file with option values")
    p.add_argument("--seed", type=int, help="random seed (default: $SGANLAB_SEED or 0)")
    p.add_argument("-o", "--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sganlab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-corpus", help="write a procedural labelled corpus")
    _common(p)
    p.add_argument("--sections", type=int)
    p.add_argument("--size", type=int, help="section height and width")
    p.add_argument("--cell-diameter", type=float)
    p.add_argument("--mito-density", type=float)
    p.add_argument("--noise-sigma", type=float)
    p.set_defaults(_fn=cmd_make_corpus, _command="make-corpus")

    p = sub.add_parser("train", help="train a GAN variant")
    _common(p)
    p.add_argument("--variant", choices=["unsup", "joint", "sgan", "dsgan"])
    p.add_argument("--data")
    p.add_argument("--resume", help="checkpoint to continue from")
    for flag, typ in (("epochs", int), ("max-steps", int), ("batch-size", int), ("patches-per-epoch", int),
                      ("crop", int), ("lr-g", float), ("lr-d", float), ("lr-f", float), ("beta1", float),
                      ("beta2", float), ("lambda-reg", float), ("lambda-cyc", float), ("label-factor", int),
                      ("g-width", int), ("x-width", int), ("x-levels", int), ("d-width", int),
                      ("d-layers", int), ("f-width", int), ("f-pretrain-steps", int),
                      ("checkpoint-every", int)):
        p.add_argument(f"--{flag}", type=typ)
    p.add_argument("--adversarial-labels", choices=["real", "synthetic"])
    p.add_argument("--reconstructor", choices=["cotrain", "pretrained"])
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.set_defaults(_fn=cmd_train, _command="train")

    p = sub.add_parser("sample", help="draw label/image pairs from a checkpoint")
    _common(p)
    p.add_argument("--ckpt")
    p.add_argument("--count", type=int)
    p.add_argument("--noise-size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--edit", action="store_true", default=None, help="clean labels before rendering")
    p.add_argument("--mito-policy", choices=["remove_concave", "hull_replace", "none"])
    p.set_defaults(_fn=cmd_sample, _command="sample")

    p = sub.add_parser("edit", help="apply label editing to a dataset")
    _common(p)
    p.add_argument("--labels")
    p.add_argument("--no-membrane-prune", dest="membrane_prune", action="store_false", default=None)
    p.add_argument("--mito-policy", choices=["remove_concave", "hull_replace", "none"])
    p.add_argument("--solidity-threshold", type=float)
    p.set_defaults(_fn=cmd_edit, _command="edit")

    p = sub.add_parser("eval", help="evaluation battery")
    modes = p.add_subparsers(dest="mode", required=True)
    m = modes.add_parser("shape")
    _common(m)
    m.add_argument("--labels")
    m.add_argument("--ref")
    m.add_argument("--folds", type=int)
    m = modes.add_parser("stats")
    _common(m)
    m.add_argument("--labels")
    m.add_argument("--ref")
    m.add_argument("--bins", type=int)
    m = modes.add_parser("seg")
    _common(m)
    m.add_argument("--segmenter", help="checkpoint holding F_y")
    m.add_argument("--fit-on", help="dataset to fit an independent segmenter on")
    m.add_argument("--fit-steps", type=int)
    m.add_argument("--pairs")
    m = modes.add_parser("support")
    _common(m)
    m.add_argument("--ckpt")
    m.add_argument("--sizes", type=_sizes, help="START:STOP[:STEP] or a comma list")
    m.add_argument("--runs", type=int)
    m.add_argument("--threshold", type=float)
    m.add_argument("--noise-size", type=int, nargs=2, metavar=("H", "W"))
    m.add_argument("--full-sweep", action="store_true", default=None)
    m = modes.add_parser("grad-attn")
    _common(m)
    m.add_argument("--ckpt")
    m.add_argument("--pairs")
    for name, m in modes.choices.items():
        m.set_defaults(_fn=cmd_eval, _command=f"eval {name}")

    p = sub.add_parser("tabular-verify", help="minimax check on random discrete problems")
    _common(p)
    p.add_argument("--problems", type=int)
    p.add_argument("--states-y", type=int)
    p.add_argument("--states-x", type=int)
    p.add_argument("--steps", type=int)
    p.set_defaults(_fn=cmd_tabular_verify, _command="tabular-verify")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .dataform import CorpusError, IngestionError, PatchSpecError, StructureError
    from .netspec import SpecError
    from .trainer import CheckpointError

    try:
        return args._fn(args)
    except (UsageError, FileNotFoundError, IngestionError, StructureError, PatchSpecError, CorpusError,
            CheckpointError, SpecError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
