"""Command-line entry point: gen-data, train, eval, roc, project."""
from __future__ import annotations

import argparse
import logging
import shutil
import sys
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

from . import __version__
from .config import RunConfig, load_config, render_config, with_overrides
from .data.manifest import DatasetManifest, load_manifest
from .data.synthetic import generate_synthetic
from .evaluation import (evaluate, orthogonal_projection, pca_projection, reject_outliers,
                         write_confusion_csv, write_projection_csv, write_roc_csv)
from .experiment import prepare_splits, restrict_classes
from .layers import TAPS
from .training import (init_state, load_model, load_state, run_epochs,
                       save_state, write_history_csv)
from .checkpoint import load_checkpoint

log = logging.getLogger("dualembed")


class CommandError(RuntimeError):
    pass


class _Written(list):
    """Paths a command creates; ones that already existed are left alone on failure."""

    def append(self, p) -> None:
        if not Path(p).exists():
            super().append(Path(p))

    def __iadd__(self, ps):
        for p in ps:
            self.append(p)
        return self


@contextmanager
def output_set(out_dir: Path):
    """Track files written for a command; remove them if the command fails."""
    out_dir.mkdir(parents=True, exist_ok=True)
    written = _Written()
    try:
        yield written
    except BaseException:
        for p in written:
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()
        raise


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return with_overrides(
        cfg, seed=args.seed, lam=getattr(args, "lam", None), placement=getattr(args, "placement", None),
        embedding=getattr(args, "embedding", None), m_d=getattr(args, "md", None),
        copies=getattr(args, "copies", None), epochs=getattr(args, "epochs", None),
        data=getattr(args, "data", None), out=args.out)


def _out_dir(cfg: RunConfig) -> Path:
    if not cfg.out_dir:
        raise CommandError("no output directory: pass --out or set [output] dir")
    return Path(cfg.out_dir)


def _echo_config(args, cfg: RunConfig, out: Path, written: list) -> None:
    if args.config:
        dst = out / "config.ini"
        if Path(args.config).resolve() != dst.resolve():
            shutil.copyfile(args.config, dst)
            written.append(dst)
    eff = out / "effective_config.ini"
    eff.write_text(render_config(cfg))
    written.append(eff)


def _load_dataset(path, cfg: Optional[RunConfig] = None) -> DatasetManifest:
    if path is None:
        raise CommandError("no dataset: pass --data or set [dataset] path")
    p = Path(path)
    if not (p / "manifest.csv").is_file():
        raise CommandError(f"dataset manifest not found: {p / 'manifest.csv'}")
    ds = cfg.dataset if cfg else None
    m = load_manifest(p, unseen_variants=ds.unseen_variants if ds else None,
                      sqrt_preprocess=ds.sqrt_preprocess if ds else None)
    return m


def _select_classes(m: DatasetManifest, names) -> DatasetManifest:
    if not names:
        return m
    missing = [n for n in names if n not in m.class_names]
    if missing:
        raise CommandError(f"unknown classes {missing}; dataset has {m.class_names}")
    return restrict_classes(m, [m.class_names.index(n) for n in names])


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    with output_set(out) as written:
        written += [out / "chips", out / "manifest.csv", out / "provenance.json"]
        generate_synthetic(cfg.dataset.generator, out)
        _echo_config(args, cfg, out, written)
    print(f"wrote dataset to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _out_dir(cfg)
    manifest = _select_classes(_load_dataset(cfg.dataset.path, cfg), cfg.dataset.classes)
    spec = cfg.model.network_spec(manifest.chip_size, manifest.num_classes)
    gen_seed = cfg.train.seed
    prepared = prepare_splits(manifest, cfg.dataset.copies, gen_seed, cfg.dataset.max_shift)
    (tx, ty), (vx, vy) = prepared.subset("train").arrays(), prepared.subset("val").arrays()
    stop_after = args.stop_after
    tcfg = cfg.train
    with output_set(out) as written:
        ckpt_path = out / "checkpoint.bin"
        if args.resume:
            state = load_state(args.resume, spec, tcfg)
        else:
            state = init_state(spec, tcfg)
        data_meta = {"classes": manifest.class_names, "copies": cfg.dataset.copies,
                     "max_shift": cfg.dataset.max_shift, "seed": gen_seed}

        def target_cfg():
            from dataclasses import replace
            return replace(tcfg, epochs=min(tcfg.epochs, stop_after)) if stop_after is not None else tcfg

        written.append(ckpt_path)
        written.append(out / "history.csv")
        run_epochs(state, tx, ty, vx, vy, target_cfg())
        save_state(ckpt_path, state, tcfg, {"data": data_meta})
        write_history_csv(out / "history.csv", state.history)
        _echo_config(args, cfg, out, written)
    print(f"trained {state.epoch} epochs; best val acc {state.best_val_acc:.4f} at epoch {state.best_epoch}")
    return 0


def _model_and_protocol(args):
    if args.config:
        cfg = load_config(args.config)
        args.data = args.data or cfg.dataset.path
        args.out = args.out or cfg.out_dir
    if not args.data:
        raise CommandError("no dataset: pass --data or set [dataset] path")
    if not args.out:
        raise CommandError("no output directory: pass --out or set [output] dir")
    ckpt = load_checkpoint(args.checkpoint)
    net = load_model(args.checkpoint)
    data = ckpt.meta.get("data", {})
    copies = args.copies if args.copies is not None else data.get("copies", 0)
    seed = args.seed if args.seed is not None else data.get("seed", 0)
    return net, data, copies, seed, data.get("max_shift")


def _test_split(path, classes, copies, seed, max_shift) -> DatasetManifest:
    m = _select_classes(_load_dataset(path), classes)
    return prepare_splits(m, copies, seed, max_shift).subset("test")


def cmd_eval(args) -> int:
    net, data, copies, seed, max_shift = _model_and_protocol(args)
    out = Path(args.out)
    test = _test_split(args.data, data.get("classes"), copies, seed, max_shift)
    if len(test) == 0:
        raise CommandError("test split is empty")
    x, y = test.arrays()
    rep = evaluate(net, x, y, test.variants(), test.unseen_variants, test.class_names)
    with output_set(out) as written:
        p = out / "report.json"
        p.write_text(rep.to_json())
        written.append(p)
        c = out / "confusion.csv"
        write_confusion_csv(c, rep)
        written.append(c)
    print(f"overall {rep.overall_acc:.4f} seen {rep.seen_acc:.4f} unseen {rep.unseen_acc:.4f}")
    return 0


def cmd_roc(args) -> int:
    net, data, copies, seed, max_shift = _model_and_protocol(args)
    out = Path(args.out)
    known = _test_split(args.data, data.get("classes"), copies, seed, max_shift)
    if args.confusers:
        conf = _test_split(args.confusers, None, copies, seed, max_shift)
    elif args.confuser_classes:
        conf = _test_split(args.data, args.confuser_classes.split(","), copies, seed, max_shift)
    else:
        raise CommandError("pass --confusers DIR or --confuser-classes NAMES")
    if len(conf) == 0:
        raise CommandError("confuser set is empty")
    if net.spec.input_size != conf.chip_size:
        raise CommandError("confuser chips differ in size from the trained network input")
    roc = reject_outliers(net, known.arrays()[0], conf.arrays()[0])
    with output_set(out) as written:
        p = out / "roc.csv"
        write_roc_csv(p, roc)
        written.append(p)
    print(f"AUC {roc.auc:.4f}; P_fa at P_d=0.9: {roc.pfa_at_pd(0.9):.4f}")
    return 0


def cmd_project(args) -> int:
    net, data, copies, seed, max_shift = _model_and_protocol(args)
    out = Path(args.out)
    m = _select_classes(_load_dataset(args.data), data.get("classes"))
    prepared = prepare_splits(m, copies, seed, max_shift)
    part = prepared.subset(args.splits.split(","))
    if len(part) == 0:
        raise CommandError("no chips in the requested splits")
    x, y = part.arrays()
    vecs = net.embed(x, args.tap)
    if args.mode == "pca":
        coords = pca_projection(vecs).coords
    else:
        i, j = (int(a) for a in args.axes.split(","))
        coords = orthogonal_projection(vecs, i, j)
    names = [part.class_names[c] for c in y]
    with output_set(out) as written:
        p = out / "projection.csv"
        write_projection_csv(p, coords, names, part.variants(), [r.split for r in part.records])
        written.append(p)
    print(f"wrote {len(coords)} points to {p}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dualembed", description=__doc__)
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="run configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("gen-data", help="render the synthetic dataset")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--data", help="dataset directory (overrides [dataset] path)")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--placement", choices=TAPS)
    p.add_argument("--embedding", choices=("none", "contrastive", "center"))
    p.add_argument("--md", type=float, help="dissimilar margin")
    p.add_argument("--copies", type=int, help="augmentation copies per chip")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-after", type=int, help="stop once this many epochs are complete")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "accuracy report"),
                                 ("roc", cmd_roc, "outlier-rejection ROC"),
                                 ("project", cmd_project, "2-D projection export")):
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", help="dataset directory (overrides [dataset] path)")
        p.add_argument("--copies", type=int, help="override augmentation copies used at training")
        p.set_defaults(func=func)
        if name == "roc":
            p.add_argument("--confusers", help="dataset directory of confuser chips")
            p.add_argument("--confuser-classes", help="comma-separated classes of --data used as confusers")
        if name == "project":
            p.add_argument("--mode", choices=("ortho", "pca"), default="ortho")
            p.add_argument("--axes", default="0,1", help="two classifier axes for ortho mode")
            p.add_argument("--tap", choices=TAPS, default="classifier")
            p.add_argument("--splits", default="test", help="comma-separated splits to export")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CommandError, ValueError, IndexError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
