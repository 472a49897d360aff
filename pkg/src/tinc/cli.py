"""Command-line surface: synth, pretrain, eval, gradcheck, report.

Only the standard library is imported at module load; numeric modules load
inside the commands so that --threads / TINC_THREADS can pin BLAS thread
counts before the first numpy import. Exit codes: 0 success, 1 usage error,
2 validation error, 3 numerical failure.
"""

import argparse
import csv
import dataclasses
import glob as globlib
import json
import os
import sys
from pathlib import Path

USAGE_EXIT = 1
VALIDATION_EXIT = 2
NUMERICAL_EXIT = 3

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _add_global_flags(p):
    p.add_argument("--config", metavar="PATH", help="JSON config file")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--seed", type=int, help="run seed (default 0)")
    p.add_argument("--preset", help="config preset: desk or paper")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS thread count (default 1); TINC_THREADS wins")
    p.add_argument("--force", action="store_true",
                   help="allow writing into a non-empty output directory")


def build_parser():
    parser = _Parser(prog="tinc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    _add_global_flags(p)
    p.add_argument("--patients", type=int, dest="n_patients")
    p.add_argument("--visits", type=int, dest="visits_per_eye")
    p.add_argument("--scans-per-visit", type=int, dest="scans_per_visit")
    p.add_argument("--interval-days", type=int, dest="visit_interval_days")
    p.add_argument("--image-size", dest="image_size",
                   help="HxW, e.g. 128x128")
    p.add_argument("--converter-fraction", type=float,
                   dest="converter_fraction")
    p.add_argument("--noise-sigma", type=float, dest="noise_sigma")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="self-supervised pretraining")
    _add_global_flags(p)
    p.add_argument("--manifest", metavar="PATH", help="cohort manifest.json")
    p.add_argument("--method",
                   help="vicreg | tinc | barlow_twins | vicreg_timehead")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float, dest="base_lr")
    p.add_argument("--warmup-epochs", type=int, dest="warmup_epochs")
    p.add_argument("--pair-mode", dest="pair_mode",
                   help="two_visit | same_scan")
    p.add_argument("--max-steps", type=int, dest="max_steps")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.add_argument("--force-zero-dv", action="store_const", const=True,
                   default=None, dest="force_zero_dv")
    p.add_argument("--lambda-inv", type=float, dest="lambda_inv")
    p.add_argument("--mu", type=float, dest="mu_var")
    p.add_argument("--nu", type=float, dest="nu_cov")
    p.add_argument("--input-size", dest="input_size", help="HxW, e.g. 64x64")
    p.add_argument("--resume", metavar="PATH", help="checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("eval", help="probe / fine-tune a checkpoint")
    _add_global_flags(p)
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--manifest", metavar="PATH")
    p.add_argument("--mode", help="probe | both")
    p.add_argument("--dv-pairs", type=int, dest="dv_pairs")
    p.add_argument("--probe-epochs", type=int, dest="probe_epochs")
    p.add_argument("--ft-epochs", type=int, dest="ft_epochs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    _add_global_flags(p)
    p.add_argument("--instances", type=int, default=20,
                   help="random instances per loss row")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--inject-bug", action="store_true",
                   help="negative-control hook: corrupt one analytic gradient")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="aggregate metrics.json files")
    _add_global_flags(p)
    p.add_argument("inputs", nargs="+",
                   help="metrics.json paths or glob patterns")
    p.add_argument("--svg", action="store_true",
                   help="also write report.svg line plots")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "func", None) is None:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: a command is required", file=sys.stderr)
        return USAGE_EXIT
    threads = os.environ.get("TINC_THREADS") or args.threads or 1
    try:
        threads = int(threads)
        if threads < 1:
            raise ValueError
    except ValueError:
        print(f"tinc: error: invalid thread count {threads!r}",
              file=sys.stderr)
        return VALIDATION_EXIT
    for var in _THREAD_VARS:
        os.environ[var] = str(threads)
    args.threads = threads

    from tinc.errors import (DivergenceError, GradientCheckError,
                             NumericalError, ValidationError)
    try:
        return args.func(args) or 0
    except ValidationError as exc:
        print(f"tinc: validation error: {exc}", file=sys.stderr)
        return VALIDATION_EXIT
    except (NumericalError, DivergenceError, GradientCheckError) as exc:
        print(f"tinc: numerical failure: {exc}", file=sys.stderr)
        return NUMERICAL_EXIT


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def _parse_size(text):
    from tinc.errors import ValidationError
    try:
        h, w = text.lower().split("x")
        return [int(h), int(w)]
    except ValueError:
        raise ValidationError(f"expected HxW size, got {text!r}")


def _resolve(args, overrides):
    from tinc import config
    return config.resolve(preset=args.preset, config_path=args.config,
                          overrides=overrides, seed=args.seed,
                          threads=args.threads,
                          manifest=getattr(args, "manifest", None),
                          out=args.out)


def _require_out(args):
    from tinc.errors import ValidationError
    if not args.out:
        raise ValidationError("--out is required for this command")
    return Path(args.out)


def _check_out_dir(out_dir, force):
    from tinc.errors import ValidationError
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ValidationError(
            f"output directory {out_dir} is not empty (use --force)")


def _flag_overrides(args, mapping):
    """Collect {section: {key: value}} from set CLI flags."""
    out = {}
    for attr, (section, key, conv) in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out.setdefault(section, {})[key] = conv(value) if conv else value
    return out


def _load_manifest(cfg):
    from tinc import cohort
    from tinc.errors import ValidationError
    if not cfg["manifest"]:
        raise ValidationError("--manifest is required for this command")
    path = Path(cfg["manifest"])
    if not path.exists():
        raise ValidationError(f"manifest not found: {path}")
    return cohort.load_manifest(path)


def _json_out(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

_SYNTH_FLAGS = {
    "n_patients": ("synth", "n_patients", None),
    "visits_per_eye": ("synth", "visits_per_eye", None),
    "scans_per_visit": ("synth", "scans_per_visit", None),
    "visit_interval_days": ("synth", "visit_interval_days", None),
    "image_size": ("synth", "image_size", _parse_size),
    "converter_fraction": ("synth", "converter_fraction", None),
    "noise_sigma": ("synth", "noise_sigma", None),
}


def cmd_synth(args):
    from tinc import config, synth
    cfg = _resolve(args, _flag_overrides(args, _SYNTH_FLAGS))
    out_dir = _require_out(args)
    _check_out_dir(out_dir, args.force)
    synth_cfg = synth.SynthConfig(
        seed=cfg["seed"],
        **config.dataclass_kwargs(cfg["synth"],
                                  {f.name for f in
                                   dataclasses.fields(synth.SynthConfig)}))
    manifest, _ = synth.generate_cohort(synth_cfg, out_dir)
    config.write_resolved(cfg, out_dir)
    n_eyes = len(list(manifest.iter_eyes()))
    n_converters = sum(1 for _, e in manifest.iter_eyes()
                       if e.conversion_day is not None)
    n_scans = sum(len(v.scans) for _, e in manifest.iter_eyes()
                  for v in e.visits)
    print(f"cohort written to {out_dir}")
    print(f"patients: {len(manifest.patients)}  eyes: {n_eyes}  "
          f"converters: {n_converters}  scans: {n_scans}")
    return 0


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------

_PRETRAIN_FLAGS = {
    "method": ("train", "method", None),
    "epochs": ("train", "epochs", None),
    "batch_size": ("train", "batch_size", None),
    "base_lr": ("train", "base_lr", None),
    "warmup_epochs": ("train", "warmup_epochs", None),
    "pair_mode": ("train", "pair_mode", None),
    "max_steps": ("train", "max_steps", None),
    "checkpoint_every": ("train", "checkpoint_every", None),
    "force_zero_dv": ("train", "force_zero_dv", None),
    "lambda_inv": ("loss", "lambda_inv", None),
    "mu_var": ("loss", "mu_var", None),
    "nu_cov": ("loss", "nu_cov", None),
    "input_size": ("model", "input_size", _parse_size),
}


def _build_train_configs(cfg):
    import dataclasses as dc

    from tinc import config, losses, trainer
    loss_cfg = losses.LossConfig(**config.dataclass_kwargs(
        cfg["loss"], {f.name for f in dc.fields(losses.LossConfig)}))
    model_cfg = trainer.ModelConfig(**config.dataclass_kwargs(
        cfg["model"], {f.name for f in dc.fields(trainer.ModelConfig)}))
    train_fields = {f.name for f in dc.fields(trainer.TrainConfig)} - {"loss",
                                                                       "seed"}
    train_cfg = trainer.TrainConfig(
        seed=cfg["seed"], loss=loss_cfg,
        **config.dataclass_kwargs(cfg["train"], train_fields))
    return train_cfg, model_cfg


def cmd_pretrain(args):
    from tinc import augment, config, trainer
    from tinc.errors import ValidationError
    cfg = _resolve(args, _flag_overrides(args, _PRETRAIN_FLAGS))
    out_dir = _require_out(args)
    method = cfg["train"]["method"]
    if method not in trainer.METHODS:
        raise ValidationError(f"unknown method {method!r}: valid methods are "
                              + ", ".join(trainer.METHODS))
    manifest = _load_manifest(cfg)
    train_cfg, model_cfg = _build_train_configs(cfg)
    policy = augment.ssl_policy(model_cfg.input_size, **{
        k: tuple(v) if isinstance(v, list) else v
        for k, v in cfg["augment"].items()})
    config.write_resolved(cfg, out_dir)
    result = trainer.pretrain(manifest, train_cfg, model_cfg, out_dir=out_dir,
                              augment_policy=policy, resume_from=args.resume)
    last = result.log[-1] if result.log else None
    print(f"pretrained {method} for {result.global_step} steps "
          f"-> {result.checkpoint_path}")
    if last is not None:
        print(f"final epoch total {last['total']:.6f}  "
              f"embed std {last['embed_std']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

_EVAL_FLAGS = {
    "mode": ("eval", "mode", None),
    "dv_pairs": ("eval", "dv_pairs", None),
    "probe_epochs": ("probe", "epochs", None),
    "ft_epochs": ("finetune", "epochs", None),
}


def cmd_eval(args):
    from tinc import augment, cohort, config, evaluate, trainer
    from tinc.errors import ValidationError
    cfg = _resolve(args, _flag_overrides(args, _EVAL_FLAGS))
    out_dir = _require_out(args)
    mode = cfg["eval"]["mode"]
    if mode not in ("probe", "both"):
        raise ValidationError(f"unknown eval mode {mode!r}: valid modes are "
                              "probe, both")
    if not args.checkpoint:
        raise ValidationError("--checkpoint is required for eval")
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise ValidationError(f"checkpoint not found: {ckpt}")
    manifest = _load_manifest(cfg)

    model, train_cfg, _, _ = trainer.load_model(ckpt)
    seed = cfg["seed"]
    split_seed = cfg["eval"]["split_seed"]
    split_seed = seed if split_seed is None else int(split_seed)
    splits = cohort.split_patients(manifest,
                                   ratios=tuple(cfg["eval"]["split_ratios"]),
                                   seed=split_seed)
    loader = augment.ScanLoader()

    probe_cfg = evaluate.ProbeConfig(seed=seed, **config.dataclass_kwargs(
        cfg["probe"], {"lr", "epochs", "batch_size", "pos_weight"}))
    probe = evaluate.linear_probe(model, manifest, splits, probe_cfg,
                                  loader=loader)

    parts = evaluate.split_supervised(manifest, splits,
                                      cfg["eval"]["window_days"])
    test_images = evaluate.load_split_images(
        manifest, parts["test"].records, model.config.input_size, loader)
    _, z_test = trainer.encode_images(model, test_images)
    collapse = evaluate.collapse_diagnostics(z_test)
    rho = evaluate.dv_probe(model, manifest,
                            n_pairs=cfg["eval"]["dv_pairs"], seed=seed,
                            gap_range_days=tuple(cfg["train"]["gap_range_days"]),
                            dv_bounds=(cfg["loss"]["dv_min_days"],
                                       cfg["loss"]["dv_max_days"]),
                            loader=loader)

    payload = {
        "scan_auroc": probe.scan_auroc,
        "scan_prauc": probe.scan_prauc,
        "volume_auroc": probe.volume_auroc,
        "volume_prauc": probe.volume_prauc,
        "collapse": collapse.to_dict(),
        "dv_spearman": rho,
        "config_hash": config.config_hash(cfg),
        "seed": seed,
        "method": train_cfg.method,
        "probe": probe.to_dict(),
    }
    if mode == "both":
        ft_cfg = evaluate.FinetuneConfig(seed=seed, **config.dataclass_kwargs(
            cfg["finetune"], {"lr", "epochs", "batch_size", "pos_weight",
                              "weight_decay", "augment"}))
        ft_model, _, _, _ = trainer.load_model(ckpt)
        payload["finetune"] = evaluate.finetune(ft_model, manifest, splits,
                                                ft_cfg, loader=loader).to_dict()
    config.write_resolved(cfg, out_dir)
    _json_out(out_dir / "metrics.json", payload)
    print(f"metrics written to {out_dir / 'metrics.json'}")
    print(f"scan auroc {probe.scan_auroc:.4f}  prauc {probe.scan_prauc:.4f}  "
          f"dv spearman {rho:.4f}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args):
    import numpy as np

    from tinc import config, losses, trainer

    cfg = _resolve(args, {})
    seed = cfg["seed"]

    undo = None
    if args.inject_bug:
        real = losses.loss_gradient

        def corrupted(loss_id, inputs, cfg=None):
            grads = real(loss_id, inputs, cfg)
            first = next(iter(sorted(grads)))
            g = np.asarray(grads[first], dtype=float).copy()
            g.reshape(-1)[0] += 1e-3
            grads[first] = g
            return grads

        losses.loss_gradient = corrupted
        undo = real

    try:
        rows = []
        rng = np.random.default_rng(np.random.SeedSequence((seed, 30)))
        for loss_id in losses.LOSS_IDS:
            variants = losses.SIMILARITY_VARIANTS if loss_id == "vicreg" \
                else (None,)
            for variant in variants:
                loss_cfg = losses.LossConfig() if variant is None else \
                    losses.LossConfig(similarity_variant=variant)
                worst = 0.0
                ok = True
                for _ in range(args.instances):
                    n = int(rng.integers(3, 9))
                    d = int(rng.integers(2, 7))
                    inputs = losses.sample_inputs(loss_id, rng, n=n, d=d)
                    rep = losses.finite_difference_check(
                        loss_id, inputs, loss_cfg, tolerance=args.tolerance)
                    worst = max(worst, rep.worst)
                    ok = ok and rep.passed
                name = loss_id if variant is None else f"{loss_id}/{variant}"
                rows.append((name, worst, ok))
        for method in ("vicreg", "barlow_twins", "vicreg_timehead"):
            rep = trainer.gradcheck_model(seed=seed, method=method,
                                          tolerance=args.tolerance)
            rows.append((f"model/{method}", rep.worst, rep.passed))
    finally:
        if undo is not None:
            losses.loss_gradient = undo

    width = max(len(r[0]) for r in rows)
    print(f"{'loss':<{width}}  {'max rel err':>12}  status")
    for name, worst, ok in rows:
        print(f"{name:<{width}}  {worst:>12.3e}  {'ok' if ok else 'FAIL'}")
    failed = [r for r in rows if not r[2]]
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        config.write_resolved(cfg, out_dir)
        _json_out(out_dir / "gradcheck.json",
                  {"rows": [{"loss": n, "max_rel_error": w, "passed": ok}
                            for n, w, ok in rows],
                   "passed": not failed})
    if failed:
        print(f"{len(failed)} gradient check(s) failed", file=sys.stderr)
        return NUMERICAL_EXIT
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

_REPORT_COLUMNS = ("method", "seed", "scan_auroc", "scan_prauc",
                   "volume_auroc", "volume_prauc", "dv_spearman")


def _load_metrics(path):
    from tinc.errors import ValidationError
    try:
        with open(path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"malformed metrics file {path}: {exc}")
    if not isinstance(data, dict):
        raise ValidationError(f"malformed metrics file {path}: not an object")
    missing = [k for k in _REPORT_COLUMNS[2:] + ("seed", "method")
               if k not in data]
    if missing:
        raise ValidationError(f"malformed metrics file {path}: missing keys "
                              + ", ".join(sorted(missing)))
    return data


def cmd_report(args):
    from tinc import config
    from tinc.errors import ValidationError
    paths = []
    for pattern in args.inputs:
        if any(ch in pattern for ch in "*?["):
            paths.extend(sorted(globlib.glob(pattern, recursive=True)))
        else:
            paths.append(pattern)
    if not paths:
        raise ValidationError("no metrics files matched the given inputs")
    runs = []
    for path in paths:
        data = _load_metrics(path)
        runs.append((path, data))
    runs.sort(key=lambda r: (r[1]["method"], r[1]["seed"], r[0]))

    lines = []
    by_method = {}
    for path, data in runs:
        row = [data["method"], data["seed"]] + \
            [float(data[c]) for c in _REPORT_COLUMNS[2:]]
        lines.append(row)
        by_method.setdefault(data["method"], []).append(row)

    header = (f"{'method':<18} {'seed':>4} " +
              " ".join(f"{c:>13}" for c in _REPORT_COLUMNS[2:]))
    table = [header, "-" * len(header)]
    for row in lines:
        table.append(f"{row[0]:<18} {row[1]:>4} " +
                     " ".join(f"{v:>13.4f}" for v in row[2:]))
    table.append("-" * len(header))
    for method in sorted(by_method):
        rows = by_method[method]
        means = [sum(r[i] for r in rows) / len(rows)
                 for i in range(2, len(_REPORT_COLUMNS))]
        table.append(f"{method:<18} {'mean':>4} " +
                     " ".join(f"{v:>13.4f}" for v in means))
    text = "\n".join(table) + "\n"
    print(text, end="")

    if args.out:
        cfg = _resolve(args, {})
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        config.write_resolved(cfg, out_dir)
        with open(out_dir / "report.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_REPORT_COLUMNS)
            for row in lines:
                writer.writerow([row[0], row[1]] + [repr(v) for v in row[2:]])
        with open(out_dir / "report.txt", "w") as fh:
            fh.write(text)
        if args.svg:
            _write_report_svg(out_dir / "report.svg", runs)
        print(f"report written to {out_dir}")
    return 0


def _polyline(values, x0, y0, w, h, lo, hi):
    if len(values) == 1:
        values = values * 2
    span = (hi - lo) or 1.0
    pts = []
    for i, v in enumerate(values):
        x = x0 + w * i / (len(values) - 1)
        y = y0 + h * (1.0 - (v - lo) / span)
        pts.append(f"{x:.2f},{y:.2f}")
    return " ".join(pts)


_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
               "#8c564b")


def _write_report_svg(path, runs):
    """Two panels: loss curves (sibling losses.jsonl, if present) and
    per-dimension std from each run's collapse block."""
    panels = []
    curves = []
    for run_path, _ in runs:
        sib = Path(run_path).parent / "losses.jsonl"
        if sib.exists():
            totals = []
            with open(sib) as fh:
                for line in fh:
                    totals.append(float(json.loads(line)["total"]))
            if totals:
                curves.append((Path(run_path).parent.name, totals))
    stds = [(Path(p).parent.name or p, d["collapse"]["per_dim_std"])
            for p, d in runs]
    width, height, pad = 520, 220, 40
    plot_w, plot_h = width - 2 * pad, height - 2 * pad

    def panel(title, series, y_offset):
        if not series:
            return [f'<text x="{pad}" y="{y_offset + 20}" '
                    f'font-size="12">{title}: no data</text>']
        lo = min(min(v) for _, v in series)
        hi = max(max(v) for _, v in series)
        out = [f'<text x="{pad}" y="{y_offset + 14}" font-size="12" '
               f'font-weight="bold">{title}</text>',
               f'<rect x="{pad}" y="{y_offset + pad}" width="{plot_w}" '
               f'height="{plot_h}" fill="none" stroke="#999"/>',
               f'<text x="{pad - 4}" y="{y_offset + pad + 10}" font-size="9" '
               f'text-anchor="end">{hi:.3g}</text>',
               f'<text x="{pad - 4}" y="{y_offset + pad + plot_h}" '
               f'font-size="9" text-anchor="end">{lo:.3g}</text>']
        for i, (name, values) in enumerate(series):
            color = _SVG_COLORS[i % len(_SVG_COLORS)]
            out.append(f'<polyline fill="none" stroke="{color}" '
                       f'points="{_polyline(values, pad, y_offset + pad, plot_w, plot_h, lo, hi)}"/>')
            out.append(f'<text x="{pad + plot_w + 6}" '
                       f'y="{y_offset + pad + 12 + 12 * i}" font-size="9" '
                       f'fill="{color}">{name}</text>')
        return out

    body = panel("training loss (total)", curves, 0)
    body += panel("per-dimension embedding std", stds, height)
    svg = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width + 120}" '
           f'height="{2 * height}" font-family="sans-serif">'
           + "".join(body) + "</svg>\n")
    with open(path, "w") as fh:
        fh.write(svg)


if __name__ == "__main__":
    sys.exit(main())
