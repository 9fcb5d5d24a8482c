"""Command-line entry point wiring the pipeline stages together.

Subcommands: fuse, split, eval-det, eval-cls, bt-train, linear-eval,
report.  Every run is deterministic given its flags and seeds, outputs
are written atomically, and --threads never changes results (only how
independent work units are scheduled).

Exit codes: 0 success, 1 domain error (message on stderr, or a JSON
object under --json-errors), 2 usage error.
"""

from __future__ import annotations

import json
import logging
import os
import sys

import click
import numpy as np

from . import barlow, lineval, metrics, stratify, wbf
from .errors import BtcxrError
from .fileio import atomic_write_text
from .ingest import load_manifest, save_manifest
from .metrics import EvalReport

logger = logging.getLogger(__name__)


def format_metric_cell(value: float, ci: tuple[float, float]) -> str:
    """Render "V (L,H)" at 4 decimal places, e.g. "0.2502 (0.2476,0.2528)"."""
    lo, hi = ci
    return f"{value:.4f} ({lo:.4f},{hi:.4f})"


def _fail(ctx_obj: dict, exc: Exception) -> None:
    if ctx_obj.get("json_errors"):
        payload = {
            "code": type(exc).__name__,
            "message": str(exc),
            "context": getattr(exc, "context", {}),
        }
        click.echo(json.dumps(payload), err=True)
    else:
        click.echo(f"error: {exc}", err=True)
    sys.exit(1)


def _guard(ctx: click.Context, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (BtcxrError, OSError, json.JSONDecodeError) as exc:
        _fail(ctx.obj, exc)


def _parse_float_list(text: str, flag: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise click.UsageError(f"{flag} expects comma-separated numbers, got {text!r}")


def _write_json(path: str, data: dict) -> None:
    atomic_write_text(path, json.dumps(data, indent=2) + "\n")


@click.group()
@click.option("--log-level", default="warning",
              type=click.Choice(["debug", "info", "warning", "error"]),
              help="Logging verbosity; the BTCXR_LOG environment variable wins.")
@click.option("--threads", default=1, type=click.IntRange(min=1),
              help="Worker threads for independent work units; never changes results.")
@click.option("--json-errors", is_flag=True,
              help="Emit domain errors as JSON {code, message, context} on stderr.")
@click.pass_context
def main(ctx, log_level, threads, json_errors):
    """Data preparation and evaluation toolkit for chest X-ray pipelines."""
    level = os.environ.get("BTCXR_LOG", log_level)
    logging.basicConfig(level=getattr(logging, level.upper(), logging.WARNING))
    ctx.ensure_object(dict)
    ctx.obj["threads"] = threads
    ctx.obj["json_errors"] = json_errors


@main.command()
@click.option("--in", "in_path", required=True,
              type=click.Path(exists=True, dir_okay=False), help="Input manifest JSON.")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Fused manifest JSON.")
@click.option("--iou-thr", default=0.4, type=float, show_default=True)
@click.option("--score-mode", default="mean", show_default=True,
              type=click.Choice(list(wbf.SCORE_MODES)))
@click.option("--rater-weight", "rater_weights", multiple=True, metavar="ID=W",
              help="Per-rater weight; repeatable.")
@click.pass_context
def fuse(ctx, in_path, out_path, iou_thr, score_mode, rater_weights):
    """Fuse duplicate multi-rater boxes into one box per lesion."""
    weights = {}
    for item in rater_weights:
        if "=" not in item:
            raise click.UsageError(f"--rater-weight expects ID=W, got {item!r}")
        rid, w = item.split("=", 1)
        try:
            weights[rid] = float(w)
        except ValueError:
            raise click.UsageError(f"--rater-weight weight must be a number, got {w!r}")

    def run():
        manifest = load_manifest(in_path)
        cfg = wbf.FusionConfig(iou_threshold=iou_thr, rater_weights=weights,
                               score_mode=score_mode)
        fused = wbf.fuse_manifest(manifest, cfg, threads=ctx.obj["threads"])
        save_manifest(fused, out_path)

    _guard(ctx, run)


@main.command()
@click.option("--in", "in_path", required=True,
              type=click.Path(exists=True, dir_okay=False), help="Input manifest JSON.")
@click.option("--fractions", default="0.8,0.1,0.1", show_default=True)
@click.option("--names", default="train,val,test", show_default=True)
@click.option("--seed", default=42, type=int, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(), help="split.json path.")
@click.pass_context
def split(ctx, in_path, fractions, names, seed, out_path):
    """Label-stratified split of a manifest into named folds."""
    fracs = tuple(_parse_float_list(fractions, "--fractions"))
    fold_names = tuple(n.strip() for n in names.split(",") if n.strip())
    if len(fracs) != len(fold_names):
        raise click.UsageError("--fractions and --names must have the same length")

    def run():
        manifest = load_manifest(in_path)
        spec = stratify.SplitSpec(fold_names=fold_names, fold_fractions=fracs, seed=seed)
        result = stratify.stratified_split(manifest, spec)
        _write_json(out_path, stratify.assignment_to_dict(result))

    _guard(ctx, run)


@main.command(name="eval-det")
@click.option("--gt", "gt_path", required=True,
              type=click.Path(exists=True, dir_okay=False), help="Ground-truth manifest JSON.")
@click.option("--pred", "pred_path", required=True,
              type=click.Path(exists=True, dir_okay=False), help="Detections JSONL.")
@click.option("--iou-thr", default=0.5, type=float, show_default=True)
@click.option("--mode", default="continuous", show_default=True,
              type=click.Choice(list(metrics.AP_MODES)))
@click.option("--bootstrap", "n_boot", default=1000, type=int, show_default=True)
@click.option("--seed", default=7, type=int, show_default=True)
@click.option("--empty-class", default="exclude", show_default=True,
              type=click.Choice(list(metrics.EMPTY_CLASS_MODES)))
@click.option("--out", "out_path", required=True, type=click.Path(), help="Report JSON path.")
@click.pass_context
def eval_det(ctx, gt_path, pred_path, iou_thr, mode, n_boot, seed, empty_class, out_path):
    """Score detections: per-class AP and mAP with bootstrap CIs."""

    def run():
        manifest = load_manifest(gt_path)
        dets = metrics.read_detections(pred_path)
        report = metrics.detection_report(
            manifest, dets, iou_thr=iou_thr, mode=mode, B=n_boot, seed=seed,
            empty_class=empty_class, threads=ctx.obj["threads"],
        )
        _write_json(out_path, report.to_dict())

    _guard(ctx, run)


@main.command(name="eval-cls")
@click.option("--gt", "gt_path", required=True,
              type=click.Path(exists=True, dir_okay=False), help="Ground-truth manifest JSON.")
@click.option("--pred", "pred_path", required=True,
              type=click.Path(exists=True, dir_okay=False), help="Label-scores JSONL.")
@click.option("--bootstrap", "n_boot", default=1000, type=int, show_default=True)
@click.option("--seed", default=7, type=int, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(), help="Report JSON path.")
@click.pass_context
def eval_cls(ctx, gt_path, pred_path, n_boot, seed, out_path):
    """Score multi-label classification: per-label and macro ROC-AUC."""

    def run():
        manifest = load_manifest(gt_path)
        scores = metrics.read_label_scores(pred_path)
        report = metrics.classification_report(
            manifest, scores, B=n_boot, seed=seed, threads=ctx.obj["threads"],
        )
        _write_json(out_path, report.to_dict())

    _guard(ctx, run)


@main.command(name="bt-train")
@click.option("--data", "data_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Flat binary: u64 header {N,H,W} then N*H*W float64; H=1 marks vectors.")
@click.option("--dims", default="16,8", show_default=True,
              help="Encoder layer widths, input first.")
@click.option("--lambda", "lambda_coeff", default=5e-3, type=float, show_default=True,
              help="Off-diagonal (redundancy) weight in the loss.")
@click.option("--lr", default=0.05, type=float, show_default=True)
@click.option("--epochs", default=500, type=int, show_default=True)
@click.option("--seed", default=1, type=int, show_default=True)
@click.option("--noise-sigma", default=0.1, type=float, show_default=True)
@click.option("--crop-scale", default="1,1", show_default=True, help="Crop scale range lo,hi.")
@click.option("--flip-prob", default=0.0, type=float, show_default=True)
@click.option("--brightness", default=0.0, type=float, show_default=True)
@click.option("--contrast", default=0.0, type=float, show_default=True)
@click.option("--trace", "trace_path", required=True, type=click.Path(),
              help="CSV output: epoch,loss_total,loss_diag,loss_offdiag.")
@click.pass_context
def bt_train(ctx, data_path, dims, lambda_coeff, lr, epochs, seed, noise_sigma,
             crop_scale, flip_prob, brightness, contrast, trace_path):
    """Train the twin-objective demo encoder on a small dataset."""
    dim_list = [int(v) for v in dims.split(",") if v.strip()]
    crop = _parse_float_list(crop_scale, "--crop-scale")
    if len(crop) != 2:
        raise click.UsageError("--crop-scale expects lo,hi")

    def run():
        data = barlow.read_train_data(data_path)
        spec = barlow.AugmentationSpec(
            crop_scale_range=(crop[0], crop[1]),
            flip_probability=flip_prob,
            noise_sigma=noise_sigma,
            brightness_jitter=brightness,
            contrast_jitter=contrast,
            seed=seed,
        )
        trace = barlow.bt_train_toy(
            data, dim_list, spec, lambda_coeff=lambda_coeff,
            lr=lr, epochs=epochs, seed=seed,
        )
        lines = ["epoch,loss_total,loss_diag,loss_offdiag"]
        for i in range(len(trace.loss_total)):
            lines.append(
                f"{i},{trace.loss_total[i]!r},{trace.loss_diag[i]!r},{trace.loss_offdiag[i]!r}"
            )
        atomic_write_text(trace_path, "\n".join(lines) + "\n")
        final = trace.final
        d = final.matrix.shape[0]
        diag_err = float(np.mean(np.abs(final.matrix.diagonal() - 1.0)))
        off = final.matrix.copy()
        np.fill_diagonal(off, 0.0)
        off_err = float(np.abs(off).sum() / (d * (d - 1))) if d > 1 else 0.0
        click.echo(f"final loss_total {final.loss_total:.6f}")
        click.echo(f"mean |diag - 1| {diag_err:.6f}")
        click.echo(f"mean |offdiag| {off_err:.6f}")

    _guard(ctx, run)


@main.command(name="linear-eval")
@click.option("--features", "train_path", required=True,
              type=click.Path(exists=True, dir_okay=False), help="Training .btfx file.")
@click.option("--test", "test_path", required=True,
              type=click.Path(exists=True, dir_okay=False), help="Held-out .btfx file.")
@click.option("--fractions", default="0.01,0.1,1.0", show_default=True)
@click.option("--repeats", default=5, type=int, show_default=True)
@click.option("--epochs", default=500, type=int, show_default=True)
@click.option("--lr", default=0.1, type=float, show_default=True)
@click.option("--l2", default=1e-4, type=float, show_default=True)
@click.option("--seed", default=3, type=int, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(), help="Report JSON path.")
@click.pass_context
def linear_eval(ctx, train_path, test_path, fractions, repeats, epochs, lr, l2, seed, out_path):
    """Linear-probe protocol: fit at several training fractions, score AUC."""
    fracs = _parse_float_list(fractions, "--fractions")

    def run():
        fs_train = lineval.read_feature_set(train_path)
        fs_test = lineval.read_feature_set(test_path)
        cfg = lineval.HeadConfig(lr=lr, epochs=epochs, l2=l2, seed=seed)
        report = lineval.evaluate_protocol(
            fs_train, fs_test, fractions=fracs, repeats=repeats, cfg=cfg, seed=seed,
        )
        _write_json(out_path, report)

    _guard(ctx, run)


@main.command()
@click.argument("report_paths", nargs=-1, required=True,
                type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_path", default=None, type=click.Path(),
              help="Write the table here instead of stdout.")
@click.pass_context
def report(ctx, report_paths, out_path):
    """Render evaluation reports as a table of "value (lo,hi)" cells.

    One file: bootstrap CIs.  Several files: treated as independent
    trials, reported as mean with the min-max band across trials.
    """

    def run():
        reports = []
        for path in report_paths:
            with open(path, "r", encoding="utf-8") as fh:
                reports.append(EvalReport.from_dict(json.load(fh)))
        text = _render_report_table(reports)
        if out_path:
            atomic_write_text(out_path, text)
        else:
            click.echo(text, nl=False)

    _guard(ctx, run)


def _render_report_table(reports: list[EvalReport]) -> str:
    names = list(reports[0].per_class.keys())
    for rep in reports[1:]:
        if list(rep.per_class.keys()) != names:
            raise BtcxrError("trial reports cover different class sets")

    rows: list[tuple[str, str]] = []
    if len(reports) == 1:
        rep = reports[0]
        for name in names:
            cell = rep.per_class[name]
            if cell.value is None:
                rows.append((name, "undefined"))
            elif cell.ci is None:
                rows.append((name, f"{cell.value:.4f}"))
            else:
                rows.append((name, format_metric_cell(cell.value, cell.ci)))
        rows.append(("overall", format_metric_cell(rep.overall, rep.overall_ci)))
        header = f"{reports[0].metric_name} over {reports[0].n_images} images (95% CI)"
    else:
        for name in names:
            values = [r.per_class[name].value for r in reports]
            defined = [v for v in values if v is not None]
            if not defined:
                rows.append((name, "undefined"))
            else:
                mean = sum(defined) / len(defined)
                rows.append((name, format_metric_cell(mean, (min(defined), max(defined)))))
        overalls = [r.overall for r in reports]
        rows.append(("overall", format_metric_cell(
            sum(overalls) / len(overalls), (min(overalls), max(overalls)))))
        header = (f"{reports[0].metric_name} over {len(reports)} trials "
                  f"(mean with min-max band)")

    width = max(len(name) for name, _ in rows)
    lines = [header]
    lines.extend(f"{name.ljust(width)}  {cell}" for name, cell in rows)
    return "\n".join(lines) + "\n"


if __name__ == "__main__":
    main()
