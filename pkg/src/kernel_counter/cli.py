"""Command-line interface: ``kernel-counter <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 I/O failure, 4 invalid data,
5 anything else. Failures print a single ``error: ...`` line on stderr.
"""
from __future__ import annotations

import csv
import logging
import sys
from pathlib import Path
from typing import Optional

import click
import numpy as np

from . import dataset as ds
from .design import AnnotatedImage, monte_carlo_search, select_thresholds, write_thresholds_csv
from .imgcore import ImageError, as_threshold_set, extract_features, load_image, write_features_csv
from .kc import STANDARDIZATION_POLICIES, KernelModel, LabeledExample
from .synth import SyntheticModelParams, model_bounds, run_experiment, write_experiment_csv
from .tune import LOSSES, TuneConfig, r_squared, rule_of_thumb_for, tune_model

DEFAULT_SEED = 20240611
EXIT_USAGE, EXIT_IO, EXIT_DATA, EXIT_OTHER = 2, 3, 4, 5

logger = logging.getLogger("kernel_counter")


def _int_list(ctx, param, value):
    if value is None:
        return None
    try:
        out = [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}")
    if not out:
        raise click.BadParameter("empty list")
    return out


def _load_thresholds(inline, path):
    if inline and path:
        raise click.UsageError("give --threshold or --thresholds-file, not both")
    if path:
        return ds.read_thresholds_file(path)
    if inline:
        return as_threshold_set(inline)
    raise click.UsageError("thresholds required (--threshold or --thresholds-file)")


def _tune_config(loss, rounding, search):
    return TuneConfig(loss=loss, rounding=rounding, search=search)


def _read_feature_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "image_id":
        raise ds.ManifestError(f"{path}: expected a header starting with image_id")
    try:
        return [(r[0], np.array([float(v) for v in r[1:]])) for r in rows[1:] if r]
    except ValueError as exc:
        raise ds.ManifestError(f"{path}: {exc}") from exc


threshold_options = [
    click.option("--threshold", "thresholds", type=(float, float, float), multiple=True,
                 help="Threshold vector T1 T2 T3 in [0, 1]; repeat for several."),
    click.option("--thresholds-file", type=click.Path(dir_okay=False),
                 help="CSV with one t1,t2,t3 row per threshold vector."),
]


def _apply(options):
    def deco(f):
        for opt in reversed(options):
            f = opt(f)
        return f
    return deco


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def cli(verbose):
    """Count objects in color micrographs with a kernel counter."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command()
@click.argument("images", nargs=-1, required=True, type=click.Path(dir_okay=False))
@_apply(threshold_options)
@click.option("--connectivity", type=click.Choice(["4", "8"]), default="8", show_default=True)
@click.option("--min-area", type=click.IntRange(min=1), default=1, show_default=True,
              help="Ignore objects with fewer pixels.")
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False),
              help="Feature CSV (image_id,r_1..r_T).")
def extract(images, thresholds, thresholds_file, connectivity, min_area, output):
    """Count objects in IMAGES under every threshold vector."""
    tset = _load_thresholds(thresholds, thresholds_file)
    rows = [(Path(p).name, extract_features(load_image(p), tset, int(connectivity), min_area))
            for p in images]
    n = write_features_csv(output, rows)
    click.echo(f"wrote {n} feature rows to {output}")


def _load_training_set(manifest, features, cache, workers):
    if bool(manifest) == bool(features):
        raise click.UsageError("give exactly one of --manifest or --features")
    if manifest:
        return ds.load_dataset(manifest, cache_path=cache, workers=workers)
    return ds.read_feature_table(features)


@cli.command()
@click.option("--manifest", type=click.Path(dir_okay=False), help="Dataset manifest.")
@click.option("--features", type=click.Path(dir_okay=False),
              help="Labeled feature table (as written by 'augment').")
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False), help="Model file.")
@click.option("--eta", type=click.FloatRange(min=0, min_open=True),
              help="Fixed bandwidth; skips cross-validation.")
@click.option("--loss", type=click.Choice(LOSSES), default="mse", show_default=True)
@click.option("--rounding/--no-rounding", default=False, show_default=True,
              help="Round LOO predictions before scoring.")
@click.option("--search", type=click.Choice(["grid", "golden"]), default="grid", show_default=True)
@click.option("--curve", type=click.Path(dir_okay=False), help="Write the LOO loss curve CSV.")
@click.option("--standardization", type=click.Choice(STANDARDIZATION_POLICIES),
              default="pooled", show_default=True)
@click.option("--cache", type=click.Path(dir_okay=False), help="Feature cache file.")
@click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True)
def train(manifest, features, output, eta, loss, rounding, search, curve, standardization,
          cache, workers):
    """Build a model from labeled images, tuning eta by LOO-CV."""
    data = _load_training_set(manifest, features, cache, workers)
    if len(data) == 0:
        raise ds.ManifestError("no labeled examples")
    model = data.to_model(eta=1.0, standardization=standardization)
    if eta is None:
        if model.size < 2:
            raise click.UsageError("cross-validation needs two examples; pass --eta")
        model, result = tune_model(model, _tune_config(loss, rounding, search))
        if curve:
            result.write_curve(curve)
        click.echo(f"eta={result.eta!r} loo_{loss}={result.best_loss!r}")
    else:
        if curve:
            raise click.UsageError("--curve needs cross-validation (drop --eta)")
        model = model.with_eta(eta)
    ds.export_model(model, output)
    click.echo(f"wrote model with {model.size} examples to {output}")


@cli.command()
@click.argument("model_path", metavar="MODEL", type=click.Path(dir_okay=False))
@click.argument("images", nargs=-1, type=click.Path(dir_okay=False))
@click.option("--manifest", type=click.Path(dir_okay=False),
              help="Predict the manifest's images and score against its labels.")
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False),
              help="Predictions CSV (image_id,prediction,rounded,variance).")
@click.option("--eta", type=click.FloatRange(min=0, min_open=True), help="Override the model's eta.")
@click.option("--rule-of-thumb", is_flag=True, help="Use the rule-of-thumb eta per test image.")
@click.option("--confidence-weighted", is_flag=True, help="Scale weights by label confidence.")
def predict(model_path, images, manifest, output, eta, rule_of_thumb, confidence_weighted):
    """Predict counts for IMAGES (or a manifest's images) with MODEL."""
    model = ds.import_model(model_path)
    if eta is not None and rule_of_thumb:
        raise click.UsageError("--eta and --rule-of-thumb are exclusive")
    if bool(images) == bool(manifest):
        raise click.UsageError("give either IMAGES or --manifest")
    if model.thresholds is None:
        raise ds.ModelFormatError("model has no thresholds; it cannot featurize images")
    targets: list[Optional[float]] = []
    if manifest:
        m = ds.read_manifest(manifest)
        paths = [e.path for e in m.entries]
        for e in m.entries:
            ex = LabeledExample(features=np.zeros(1), **e.label)
            targets.append(float(np.mean(ex.targets())))
    else:
        paths = [Path(p) for p in images]
        targets = [None] * len(paths)
    results = []
    for p in paths:
        x = extract_features(load_image(p), model.thresholds, model.connectivity, model.min_area)
        use_eta = rule_of_thumb_for(model, x) if rule_of_thumb else eta
        pred = (model.predict_confidence_weighted(x, use_eta) if confidence_weighted
                else model.predict(x, use_eta))
        results.append((p.name, pred))
    n = ds.export_results(results, output)
    click.echo(f"wrote {n} predictions to {output}")
    if manifest and n:
        pred = np.array([r.value for _, r in results])
        truth = np.array(targets)
        click.echo(f"R2={r_squared(pred, truth):.4f} MAE={np.mean(np.abs(pred - truth)):.4f}")


@cli.command()
@click.argument("model_path", metavar="MODEL", type=click.Path(dir_okay=False))
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False),
              help="CSV image_id,label,smoothed,variance,std,flag.")
@click.option("--review-fraction", type=click.FloatRange(min=0, min_open=True), default=0.25,
              show_default=True, help="Flag REVIEW when 2*std exceeds this fraction of the smoothed value.")
def smooth(model_path, output, review_fraction):
    """Smooth the model's training labels and flag uncertain ones."""
    model = ds.import_model(model_path)
    sm = model.smooth()
    std = np.sqrt(sm.variances)
    flags = np.where(2.0 * std > review_fraction * sm.values, "REVIEW", "")
    with open(output, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "label", "smoothed", "variance", "std", "flag"])
        for row in zip(model.image_ids, model.labels, sm.values, sm.variances, std, flags):
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:5]] + [row[5]])
    click.echo(f"wrote {model.size} smoothed labels to {output}; {int((flags == 'REVIEW').sum())} flagged")


@cli.command()
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False))
@click.option("--T", "T_values", callback=_int_list, default="2,5,10,20,50,100,200",
              show_default=True, help="Comma-separated numbers of thresholds.")
@click.option("--D", "D", type=click.IntRange(min=2), default=2000, show_default=True)
@click.option("--runs", type=click.IntRange(min=1), default=200, show_default=True)
@click.option("--gamma", "gammas", callback=_int_list, default="0", show_default=True,
              help="Comma-separated label noise amplitudes.")
@click.option("--seed", type=int, default=DEFAULT_SEED, show_default=True)
@click.option("--eta", type=click.FloatRange(min=0, min_open=True),
              help="Fixed eta instead of per-run LOO-CV.")
@click.option("--mode", type=click.Choice(["smooth", "predict"]), default="smooth", show_default=True)
@click.option("--loss", type=click.Choice(LOSSES), default="mse", show_default=True)
@click.option("--search", type=click.Choice(["grid", "golden"]), default="golden", show_default=True)
def synth(output, T_values, D, runs, gammas, seed, eta, mode, loss, search):
    """Synthetic MSE-versus-T experiment."""
    if min(T_values) < 2:
        raise click.BadParameter("every T must be >= 2", param_hint="--T")
    if min(gammas) < 0:
        raise click.BadParameter("gamma must be >= 0", param_hint="--gamma")
    rows = run_experiment(T_values, D, runs, gammas, seed, eta, mode,
                          TuneConfig(loss=loss, search=search))
    write_experiment_csv(output, rows)
    click.echo(f"wrote {len(rows)} rows to {output}")


@cli.command("design-thresholds")
@click.option("--pair", "pairs", type=(click.Path(dir_okay=False), click.Path(dir_okay=False)),
              multiple=True, required=True,
              help="IMAGE LABELS: an image and its integer cell-label image (0 = background).")
@click.option("-T", "T", type=click.IntRange(min=1), default=5, show_default=True,
              help="Number of thresholds to select.")
@click.option("--runs", type=click.IntRange(min=1), default=100_000, show_default=True,
              help="Monte Carlo samples.")
@click.option("--seed", type=int, default=DEFAULT_SEED, show_default=True)
@click.option("--connectivity", type=click.Choice(["4", "8"]), default="8", show_default=True)
@click.option("--table", type=click.Path(dir_okay=False), required=True,
              help="Conditional optima CSV (tp,fp,snr,t1,t2,t3).")
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False),
              help="Selected thresholds CSV.")
def design_thresholds(pairs, T, runs, seed, connectivity, table, output):
    """Search for high-SNR thresholds on annotated images."""
    import cv2

    annotated = []
    for img_path, lab_path in pairs:
        labels = cv2.imread(str(lab_path), cv2.IMREAD_UNCHANGED)
        if labels is None:
            raise OSError(f"cannot read label image: {lab_path}")
        if labels.ndim != 2:
            raise ImageError(f"label image must be single-channel: {lab_path}")
        annotated.append(AnnotatedImage.from_label_image(load_image(img_path), labels))
    result = monte_carlo_search(annotated, runs, seed, int(connectivity))
    result.write_csv(table)
    chosen = select_thresholds(result, T)
    write_thresholds_csv(output, chosen)
    click.echo(f"{len(result)} conditional optima; wrote {len(chosen)} thresholds to {output}")


@cli.command()
@click.argument("manifest", type=click.Path(dir_okay=False))
@click.option("--delta", "deltas", type=float, multiple=True,
              help="Brightness offset; repeat for several.")
@click.option("--reference", type=click.Choice(["corpus", "source"]), default="corpus",
              show_default=True, help="Histogram the adapted thresholds are matched to.")
@click.option("--cache", type=click.Path(dir_okay=False), help="Feature cache file.")
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False),
              help="Labeled feature table.")
def augment(manifest, deltas, reference, cache, output):
    """Add brightness-shifted copies and interval midpoints to a dataset."""
    data = ds.load_dataset(manifest, cache_path=cache)
    out = ds.augment_dataset(data, deltas, reference)
    ds.write_feature_table(output, out)
    click.echo(f"wrote {len(out)} examples ({len(data)} original) to {output}")


@cli.command()
@click.option("--features", "features_path", type=click.Path(dir_okay=False),
              help="Feature CSV (image_id,r_1..r_T).")
@click.option("--r", "r_inline", help="Comma-separated observed counts of one image.")
@click.option("--slack", type=click.FloatRange(min=0), default=0.0, show_default=True,
              help="Allowance for rounding of the observed counts (0.5 covers nearest-integer rounding).")
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False),
              help="CSV image_id,k,alpha,v,s,r,lower,upper; k='all' rows intersect the bounds.")
def bounds(features_path, r_inline, slack, output):
    """Bounds on the true count under the synthetic count model."""
    if bool(features_path) == bool(r_inline):
        raise click.UsageError("give exactly one of --features or --r")
    if features_path:
        items = _read_feature_csv(features_path)
    else:
        try:
            items = [("r", np.array([float(v) for v in r_inline.split(",")]))]
        except ValueError:
            raise click.BadParameter("expected comma-separated numbers", param_hint="--r")
    with open(output, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "k", "alpha", "v", "s", "r", "lower", "upper"])
        for image_id, r in items:
            params = SyntheticModelParams.from_T(r.shape[0])
            lo_all, hi_all = 0, None
            for k in range(1, params.T):  # alpha_1 = 0 carries no information
                a, v, s = params.alphas[k], params.v[k], params.s[k]
                lo, hi = model_bounds(r[k], a, v, s, slack)
                lo_all = max(lo_all, lo)
                hi_all = hi if hi_all is None else min(hi_all, hi)
                w.writerow([image_id, k + 1, repr(float(a)), v, s, repr(float(r[k])), lo, hi])
            w.writerow([image_id, "all", "", "", "", "", lo_all, hi_all])
    click.echo(f"wrote bounds for {len(items)} image(s) to {output}")


def run(argv=None) -> int:
    """Run the CLI and return an exit code instead of raising."""
    try:
        cli.main(args=argv, prog_name="kernel-counter", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.Abort:
        click.echo("error: aborted", err=True)
        return EXIT_OTHER
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return EXIT_OTHER
    except (OSError, ImageError) as exc:
        click.echo(f"error: {_one_line(exc)}", err=True)
        return EXIT_IO
    except (ds.DatasetError, ValueError) as exc:
        click.echo(f"error: {_one_line(exc)}", err=True)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        click.echo(f"error: {type(exc).__name__}: {_one_line(exc)}", err=True)
        return EXIT_OTHER
    return 0


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
