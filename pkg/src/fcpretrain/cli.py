"""Command-line entry point.

Exit codes: 0 success, 1 validation/parameter error, 2 I/O or format error,
3 numeric failure. Every subcommand that writes artifacts also writes
``run.json`` (command, config, seed, versions, sha256 of each output) into its
output directory.

Config files are JSON. Either a flat document with the encoder fields
(``v_rois n_layers n_heads ffn_dim readout_dim mask_ratio``) or
``{"encoder": {...}, "train": {...}}``. Command-line flags override the file.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import connectome as fc
from . import encoder as enc
from . import ingest, probe, ssl, synth, trainer
from . import numerics as nx

EXIT_OK, EXIT_PARAM, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

TINY_CONFIG = enc.EncoderConfig(v_rois=8, n_layers=2, n_heads=2, ffn_dim=16, readout_dim=4, mask_ratio=0.25)

log = logging.getLogger("fcpretrain")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_PARAM, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fcpretrain", description="Self-supervised pretraining on functional connectomes.",
                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = p.add_subparsers(dest="command", metavar="{synth,augment,pretrain,embed,probe,ensemble,attn,gradcheck}",
                           parser_class=_Parser)
    sub.required = True
    fmt = argparse.ArgumentDefaultsHelpFormatter

    s = sub.add_parser("synth", help="generate a synthetic cohort", formatter_class=fmt)
    s.add_argument("--subjects", type=int, default=200, help="number of subjects")
    s.add_argument("--rois", type=int, default=16, help="ROIs per scan (V)")
    s.add_argument("--timepoints", type=int, default=200, help="timepoints per scan (T)")
    s.add_argument("--classes", type=int, default=2, help="number of classes")
    s.add_argument("--effect", type=float, default=0.1, help="class effect on block coupling")
    s.add_argument("--seed", type=int, default=0, help="random seed")
    s.add_argument("--format", choices=("csv", "bts"), default="csv", help="scan file format")
    s.add_argument("--out", required=True, help="output directory")

    a = sub.add_parser("augment", help="write pseudo-FC views of one scan", formatter_class=fmt)
    a.add_argument("--scan", required=True, help="scan file (.csv or .bts)")
    a.add_argument("--drop-rate", type=float, default=fc.DEFAULT_DROP_RATE, help="fraction of timepoints dropped")
    a.add_argument("--views", type=int, default=2, help="number of views")
    a.add_argument("--seed", type=int, default=0, help="random seed")
    a.add_argument("--out", required=True, help="output directory")

    t = sub.add_parser("pretrain", help="self-supervised pretraining", formatter_class=fmt)
    t.add_argument("--manifest", required=True, help="cohort manifest TSV")
    t.add_argument("--config", help="JSON config (encoder and train sections)")
    t.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--ablate", default="", help="comma-separated objectives to disable: latent,mrm_cls,mrm_rec")
    t.add_argument("--deterministic", action="store_true", help="force serial, bitwise-reproducible execution")

    e = sub.add_parser("embed", help="extract frozen embeddings", formatter_class=fmt)
    e.add_argument("--ckpt", required=True, help="checkpoint file")
    e.add_argument("--manifest", required=True, help="cohort manifest TSV")
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--threads", type=int, default=1, help="worker threads for extraction")

    r = sub.add_parser("probe", help="linear SVM probe with repeated evaluation", formatter_class=fmt)
    r.add_argument("--embeddings", required=True, help="embeddings CSV")
    r.add_argument("--repeats", type=int, default=10, help="number of resampled val/test draws")
    r.add_argument("--seed", type=int, default=0, help="random seed")
    r.add_argument("--out", required=True, help="output directory")

    n = sub.add_parser("ensemble", help="zero/few-shot ensemble of saved classifiers", formatter_class=fmt)
    n.add_argument("--classifiers", required=True, help="directory of classifier JSON files")
    n.add_argument("--embeddings", required=True, help="embeddings CSV of the target task")
    n.add_argument("--mode", choices=("zero", "few"), default="zero", help="ensemble mode")
    n.add_argument("--support-frac", type=float, default=0.2,
                   help="few-shot: fraction of the given embeddings used as labelled support")
    n.add_argument("--seed", type=int, default=0, help="random seed")
    n.add_argument("--out", required=True, help="output directory")

    h = sub.add_parser("attn", help="export an attention heatmap", formatter_class=fmt)
    h.add_argument("--ckpt", required=True, help="checkpoint file")
    h.add_argument("--manifest", required=True, help="cohort manifest TSV")
    h.add_argument("--layer", choices=("first", "last", "mean"), default="mean", help="layer selection")
    h.add_argument("--out", required=True, help="output directory")
    h.add_argument("--threads", type=int, default=1, help="worker threads for the forward passes")

    g = sub.add_parser("gradcheck", help="finite-difference check of the full objective", formatter_class=fmt)
    g.add_argument("--config", help="JSON config; defaults to the built-in tiny config")
    g.add_argument("--precision", type=int, choices=(64,), default=64, help="floating-point bits")
    g.add_argument("--seed", type=int, default=0, help="random seed")
    return p


# ---------------------------------------------------------------------------
# helpers


def load_config(path) -> tuple[enc.EncoderConfig, dict]:
    if path is None:
        return enc.EncoderConfig(), {}
    doc = json.loads(Path(path).read_text())
    if "encoder" in doc or "train" in doc:
        extra = set(doc) - {"encoder", "train"}
        if extra:
            raise ValueError(f"unknown config sections: {sorted(extra)}")
        return enc.EncoderConfig.from_dict(doc.get("encoder", {})), dict(doc.get("train", {}))
    return enc.EncoderConfig.from_dict(doc), {}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_manifest(out: Path, command: str, argv, config: dict, seed, outputs) -> None:
    doc = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "versions": {"fcpretrain": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "outputs": {str(Path(o).relative_to(out)): _sha256(Path(o)) for o in outputs},
    }
    (out / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _threads(args) -> int:
    if args.threads < 1:
        raise ValueError(f"--threads must be >= 1, got {args.threads}")
    return args.threads


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args, argv):
    out = _outdir(args.out)
    spec = synth.SynthSpec(n_subjects=args.subjects, v_rois=args.rois, t_points=args.timepoints,
                           n_classes=args.classes, class_effect=synth.default_class_effect(args.classes, args.effect),
                           seed=args.seed)
    manifest = synth.gen_cohort(spec, out, fmt=args.format)
    outputs = [manifest] + sorted((out / "scans").iterdir())
    cfg = {k: v for k, v in asdict(spec).items() if k != "class_effect"}
    cfg["effect"] = args.effect
    write_run_manifest(out, "synth", argv, cfg, args.seed, outputs)
    print(manifest)


def cmd_augment(args, argv):
    data = ingest.load_scan(args.scan)
    out = _outdir(args.out)
    sid = Path(args.scan).stem
    outputs, plans = [], []
    for k in range(args.views):
        plan = fc.make_drop_plan(data.shape[1], args.drop_rate, fc.view_seed(args.seed, sid, k))
        path = out / f"pfc_view{k}.csv"
        fc.write_connectome_csv(path, fc.pfc_augment(data, plan, sid))
        outputs.append(path)
        plans.append({"view": k, "seed": plan.seed, "dropped": list(plan.dropped_columns)})
    write_run_manifest(out, "augment", argv, {"drop_rate": args.drop_rate, "views": args.views, "plans": plans},
                       args.seed, outputs)


def cmd_pretrain(args, argv):
    cfg, tdoc = load_config(args.config)
    if args.seed is not None:
        tdoc["seed"] = args.seed
    if args.deterministic:
        tdoc["deterministic"] = True
    tc = trainer.TrainConfig.from_dict(tdoc)
    if args.ablate:
        obj = ssl.Objectives.without(args.ablate.split(","))
        tc = replace(tc, latent=obj.latent, mrm_cls=obj.mrm_cls, mrm_rec=obj.mrm_rec)
    manifest = ingest.load_manifest(args.manifest)
    if manifest.atlas_rois != cfg.v_rois:
        raise ValueError(f"manifest has V={manifest.atlas_rois}, config expects v_rois={cfg.v_rois}")
    scans = ingest.load_cohort(manifest)
    out = _outdir(args.out)
    res = trainer.pretrain(scans, cfg, tc, out_dir=out)
    write_run_manifest(out, "pretrain", argv, {"encoder": asdict(cfg), "train": asdict(tc)}, tc.seed,
                       [out / "checkpoint.bmass", out / "loss_curve.csv"])
    best = res.checkpoint.best_loss
    print(f"best epoch-mean loss {best:.6f} at epoch {res.checkpoint.epoch}" if np.isfinite(best) else "untrained")


def cmd_embed(args, argv):
    ckpt = trainer.load_checkpoint(args.ckpt)
    manifest = ingest.load_manifest(args.manifest)
    scans = [s for s in ingest.load_cohort(manifest) if s.label >= 0]
    records = probe.extract_embeddings(ckpt.params, ckpt.cfg, scans, threads=_threads(args))
    out = _outdir(args.out)
    path = out / "embeddings.csv"
    probe.write_embeddings(path, records)
    write_run_manifest(out, "embed", argv, {"encoder": asdict(ckpt.cfg), "ckpt": str(args.ckpt)}, None, [path])


def cmd_probe(args, argv):
    records = probe.read_embeddings(args.embeddings)
    report = probe.repeated_eval(records, args.repeats, args.seed)
    out = _outdir(args.out)
    mpath = out / "metrics.json"
    mpath.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    cpath = out / "svm.json"
    probe.fit_probe(records, args.seed).save(cpath)
    write_run_manifest(out, "probe", argv, {"repeats": args.repeats}, args.seed, [mpath, cpath])
    acc = report.mean["accuracy"]
    print(f"accuracy {acc:.4f} +- {report.std['accuracy']:.4f}")


def cmd_ensemble(args, argv):
    paths = sorted(Path(args.classifiers).glob("*.json"))
    if not paths:
        raise FileNotFoundError(f"no classifier JSON files in {args.classifiers}")
    models = [probe.SvmModel.load(p) for p in paths]
    records = [r for r in probe.read_embeddings(args.embeddings) if r.label >= 0]
    x = np.stack([r.vector for r in records])
    y = np.array([r.label for r in records])
    query = np.arange(len(records))
    weights = None
    if args.mode == "few":
        if not 0.0 < args.support_frac < 1.0:
            raise ValueError("--support-frac must be in (0, 1)")
        split = probe.stratified_split(records, (args.support_frac, 0.0, 1.0 - args.support_frac), args.seed,
                                       warn=False)
        support = np.array([s == "train" for s in split])
        weights = probe.ensemble_few_shot(models, x[support], y[support])
        query = np.flatnonzero(~support)
    prob = probe.ensemble_proba(models, x[query], weights)
    pred = (prob >= 0.5).astype(int)
    report = probe.metrics(pred, y[query])
    out = _outdir(args.out)
    path = out / "ensemble.json"
    path.write_text(json.dumps({
        "mode": args.mode, "classifiers": [p.name for p in paths],
        "weights": (weights.tolist() if weights is not None else [1.0 / len(models)] * len(models)),
        "metrics": report.to_dict(),
        "probabilities": {records[i].subject_id: float(p) for i, p in zip(query, prob)},
    }, indent=2, sort_keys=True))
    write_run_manifest(out, "ensemble", argv, {"mode": args.mode, "support_frac": args.support_frac}, args.seed,
                       [path])
    print(f"accuracy {report.accuracy:.4f}")


def cmd_attn(args, argv):
    ckpt = trainer.load_checkpoint(args.ckpt)
    scans = ingest.load_cohort(ingest.load_manifest(args.manifest))
    xs = np.stack([fc.pearson_fc(s.data).matrix for s in scans]).astype(np.float32)
    heat = enc.attention_heatmap(ckpt.encoder_params, ckpt.cfg, xs, args.layer, threads=_threads(args))
    out = _outdir(args.out)
    path = out / f"attention_{args.layer}.csv"
    np.savetxt(path, heat, delimiter=",", fmt="%.10g")
    write_run_manifest(out, "attn", argv, {"layer": args.layer}, None, [path])


def gradcheck_error(cfg: enc.EncoderConfig, seed: int = 0, param_scale: float = 0.3) -> float:
    """Max relative error of the full weighted objective's gradient (float64)."""
    rng = np.random.default_rng(seed)
    model = ssl.init_model(cfg, seed, dtype=np.float64)
    for k, v in model.online.items():
        if not k.endswith(".gain"):
            model.online[k] = rng.normal(0.0, param_scale, size=v.shape)
    model.target = {k: v + rng.normal(0.0, 0.1, size=v.shape) for k, v in model.encoder_params.items()}
    spec = synth.SynthSpec(n_subjects=2, v_rois=cfg.v_rois, t_points=40, seed=seed)
    batch = ssl.make_batch(synth.gen_scans(spec, splits=["train"] * 2), cfg, fc.DEFAULT_DROP_RATE, seed)
    names = list(model.online)

    def objective(ps):
        return ssl.batch_loss(dict(zip(names, ps)), model.target, cfg, batch).total

    return nx.grad_check(objective, [nx.Tensor(model.online[k]) for k in names], h=1e-5)


def cmd_gradcheck(args, argv):
    cfg = load_config(args.config)[0] if args.config else TINY_CONFIG
    err = gradcheck_error(cfg, args.seed)
    print(f"max relative error {err:.3e}")
    if err >= 1e-3:
        raise nx.NumericError(f"gradient check failed: {err:.3e} >= 1e-3")


COMMANDS = {
    "synth": cmd_synth, "augment": cmd_augment, "pretrain": cmd_pretrain, "embed": cmd_embed,
    "probe": cmd_probe, "ensemble": cmd_ensemble, "attn": cmd_attn, "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        COMMANDS[args.command](args, argv)
    except (FileNotFoundError, IsADirectoryError, PermissionError, ingest.FormatError,
            trainer.CorruptCheckpoint) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, nx.NumericError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, TypeError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARAM
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
