"""Command-line interface: ``urbanicl <command> [flags]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .checkpoint import load_checkpoint
from .config import DEFAULTS, resolve
from .diffusion import MaskVector, build_schedule
from .errors import ConfigError, DataError, NumericalError, UrbanICLError
from .gradcheck import run_gradcheck
from .inference import InferenceRequest, ensemble_to_json, load_prediction, predict
from .model import ModelConfig
from .regions import (
    Profile,
    RegionSet,
    generate_synthetic_city,
    load_profile_csv,
    load_profile_matrix_json,
    load_reference_embeddings,
    load_split,
    make_split,
    normalize,
    save_profile_csv,
    save_profile_matrix_json,
    save_reference_embeddings,
    save_split,
)
from .training import train

log = logging.getLogger("urbanicl")

# flag -> (RunConfig field, type, help)
TRAIN_FLAGS = [
    ("--data", "data", str, "profile matrix JSON with pretraining profiles"),
    ("--ref", "ref", str, "reference embeddings JSON for alignment"),
    ("--out", "out_dir", str, "output directory for checkpoints and loss curve"),
    ("--epochs", "epochs", int, "training epochs"),
    ("--batch-size", "batch_size", int, "profiles per optimisation step"),
    ("--lr", "lr", float, "Adam learning rate"),
    ("--lambda-mask", "lambda_mask", float, "weight of the mask-prediction loss"),
    ("--lambda-align", "lambda_align", float, "weight of the alignment loss (needs --ref)"),
    ("--layers", "n_layers", int, "transformer layers"),
    ("--dim", "hidden_dim", int, "hidden width"),
    ("--heads", "n_heads", int, "attention heads"),
    ("--ref-dim", "ref_dim", int, "alignment head width (default: reference width, or 0)"),
    ("--T", "T", int, "diffusion steps"),
    ("--beta-start", "beta_start", float, "first beta of the linear schedule"),
    ("--beta-end", "beta_end", float, "last beta of the linear schedule"),
    ("--val-every", "val_every", int, "epochs between validation passes"),
    ("--val-fraction", "val_fraction", float, "share of profiles held out for validation"),
    ("--max-grad-norm", "max_grad_norm", float, "clip gradients to this global norm"),
    ("--seed", "seed", int, "global random seed"),
]


def _default_text(field):
    value = getattr(DEFAULTS, field)
    return "none" if value is None else repr(value)


def _add_table(parser, table):
    for flag, field, typ, text in table:
        parser.add_argument(flag, dest=field, type=typ, default=None,
                            help=f"{text} (default: {_default_text(field)})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="urbanicl", description="Masked diffusion transformer for urban profiling.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic city (profiles, reference embeddings, split)")
    p.add_argument("--regions", type=int, default=64, help="number of regions (default: 64)")
    p.add_argument("--profiles", type=int, default=200, help="pretraining profiles (default: 200)")
    p.add_argument("--latent", type=int, default=8, help="latent factor dimension (default: 8)")
    p.add_argument("--noise-std", type=float, default=0.1, help="noise of pretraining profiles (default: 0.1)")
    p.add_argument("--indicators", type=int, default=3, help="held-out indicator profiles (default: 3)")
    p.add_argument("--indicator-noise-std", type=float, default=None,
                   help="noise of indicator profiles (default: same as --noise-std)")
    p.add_argument("--split", type=float, nargs=3, default=(0.7, 0.1, 0.2), metavar=("TRAIN", "VAL", "TEST"),
                   help="region split fractions (default: 0.7 0.1 0.2)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--out", default=".", help="output directory (default: .)")

    p = sub.add_parser("train", help="pretrain a model")
    p.add_argument("--config", help="JSON config file keyed by run-config field names (default: none)")
    _add_table(p, TRAIN_FLAGS)

    p = sub.add_parser("infer", help="predict unknown regions of one profile")
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--profile", required=True, help="profile CSV (region_id,<name>)")
    p.add_argument("--mask-file", required=True,
                   help="JSON with 'mask' bits (1 = unknown), 'unknown' ids, or a split file (train = observed)")
    p.add_argument("--rounds", type=int, default=DEFAULTS.rounds, help=f"reverse chains K (default: {DEFAULTS.rounds})")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--no-normalize", action="store_true",
                   help="treat profile values as already normalised (default: z-score with observed regions)")
    p.add_argument("--out", default="prediction.json", help="prediction JSON path (default: prediction.json)")

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--pred", nargs="+", required=True, help="prediction JSON or profile CSV file(s)")
    p.add_argument("--truth", required=True, help="ground-truth profile CSV")
    p.add_argument("--split", help="split file; score its test regions (default: unknown regions of the prediction)")
    p.add_argument("--task", default="", help="task name echoed in the report (default: truth indicator name)")
    p.add_argument("--aggregate", action="store_true", help="average metrics over all --pred files (default: off)")
    p.add_argument("--out", help="report JSON path (default: stdout)")

    p = sub.add_parser("analyze", help="analysis tools")
    asub = p.add_subparsers(dest="analysis", required=True)
    a = asub.add_parser("kde", help="Epanechnikov density of one region's samples")
    a.add_argument("--samples", required=True, help="prediction JSON with samples")
    a.add_argument("--region", type=int, required=True, help="region id")
    a.add_argument("--bandwidth", type=float, help="kernel bandwidth (default: 1.06 * std * n^-1/5)")
    a.add_argument("--grid", type=int, default=512, help="number of grid points (default: 512)")
    a.add_argument("--out", default="kde.csv", help="output CSV x,density (default: kde.csv)")
    a = asub.add_parser("scaling", help="fit y = a * exp(b * x)")
    a.add_argument("--points", required=True, help="CSV with header x,y")
    a.add_argument("--out", help="fit JSON path (default: stdout)")
    a = asub.add_parser("cluster", help="k-means over learned region embeddings")
    a.add_argument("--checkpoint", required=True, help="model checkpoint")
    a.add_argument("--k", type=int, default=5, help="number of clusters (default: 5)")
    a.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    a.add_argument("--out", default="clusters.csv", help="output CSV region_id,cluster (default: clusters.csv)")
    a = asub.add_parser("probe", help="two-stage ridge probe on frozen embeddings")
    a.add_argument("--embeddings", required=True, help="reference embeddings JSON")
    a.add_argument("--profile", required=True, help="indicator profile CSV")
    a.add_argument("--split", required=True, help="split file")
    a.add_argument("--ridge", type=float, default=1e-3, help="ridge penalty (default: 0.001)")
    a.add_argument("--out", help="result JSON path (default: stdout)")

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    p.add_argument("--regions", type=int, default=8, help="regions (default: 8)")
    p.add_argument("--dim", type=int, default=16, help="hidden width (default: 16)")
    p.add_argument("--layers", type=int, default=2, help="layers (default: 2)")
    p.add_argument("--heads", type=int, default=2, help="heads (default: 2)")
    p.add_argument("--ref-dim", type=int, default=4, help="alignment width (default: 4)")
    p.add_argument("--T", type=int, default=10, help="diffusion steps (default: 10)")
    p.add_argument("--step", type=float, default=1e-4, help="finite-difference step (default: 1e-4)")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error (default: 1e-4)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    return parser


# helpers -------------------------------------------------------------------


def _write_json(payload, path):
    text = json.dumps(payload, indent=2) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _require_file(path, what):
    if not Path(path).is_file():
        raise ConfigError(f"{what} {path!r} does not exist")


def _read_mask(path, n: int) -> MaskVector:
    _require_file(path, "mask file")
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except ValueError as exc:
        raise DataError(f"{path}: not valid JSON ({exc})") from exc
    if "mask" in payload:
        bits = np.asarray(payload["mask"])
        if bits.shape != (n,) or not np.all((bits == 0) | (bits == 1)):
            raise DataError(f"{path}: 'mask' must be {n} bits of 0/1")
    elif "unknown" in payload:
        bits = np.zeros(n, dtype=np.int8)
        ids = np.asarray(payload["unknown"], dtype=np.int64)
        if np.any(ids < 0) or np.any(ids >= n):
            raise DataError(f"{path}: region id out of range 0..{n - 1}")
        bits[ids] = 1
    elif "train" in payload:
        bits = load_split(path, RegionSet(n)).observed_mask()
    else:
        raise DataError(f"{path}: expected a 'mask', 'unknown' or split ('train') entry")
    return MaskVector.from_bits(bits)


def _observed_normalize(values, known):
    if known.sum() < 2:
        norm_mean, norm_std = float(values[known].mean()), 1.0
    else:
        obs = normalize(Profile(values[known]))
        norm_mean, norm_std = obs.norm_mean, obs.norm_std
    return (values - norm_mean) / norm_std, norm_mean, norm_std


# commands ------------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    if args.regions < 2:
        raise ConfigError(f"--regions must be >= 2, got {args.regions}")
    matrix, ref = generate_synthetic_city(args.regions, args.profiles, args.latent, args.noise_std, args.seed,
                                          n_indicators=args.indicators,
                                          indicator_noise_std=args.indicator_noise_std)
    split = make_split(matrix.region_set, args.split, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_profile_matrix_json(matrix, out / "profiles.json")
    save_reference_embeddings(ref, out / "reference.json")
    save_split(split, out / "split.json")
    (out / "mask.json").write_text(json.dumps({"mask": split.observed_mask().tolist()}) + "\n", encoding="utf-8")
    for prof, tag in zip(matrix.profiles, matrix.source_tags):
        if tag == "indicator":
            save_profile_csv(prof, out / f"{prof.indicator_name}.csv")
    log.info("wrote synthetic city with %d regions to %s", args.regions, out)
    return 0


def cmd_train(args) -> int:
    flags = {field: getattr(args, field) for _, field, _, _ in TRAIN_FLAGS}
    cfg, explicit = resolve(flags, args.config)
    if cfg.data is None:
        raise ConfigError("--data is required (flag or config file)")
    if cfg.out_dir is None:
        raise ConfigError("--out is required (flag or config file)")
    _require_file(cfg.data, "data file")
    if cfg.ref is None and "lambda_align" in explicit and cfg.lambda_align > 0:
        raise ConfigError("--lambda-align needs reference embeddings (--ref)")
    if cfg.ref is not None:
        _require_file(cfg.ref, "reference file")
    train_cfg = cfg.train_config()
    matrix = load_profile_matrix_json(cfg.data)
    ref = load_reference_embeddings(cfg.ref, matrix.region_set) if cfg.ref else None
    model_cfg = cfg.model_config(matrix.region_set.count, ref.shape[1] if ref is not None else None)
    result = train(matrix, train_cfg, ref, out_dir=cfg.out_dir, model_config=model_cfg, progress=True)
    last = result.curve[-1]
    log.info("done: final total %.5f, best epoch %d", last.total, result.best_epoch)
    return 0


def cmd_infer(args) -> int:
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.profile, "profile")
    if args.rounds < 1:
        raise ConfigError("--rounds must be >= 1")
    params, config = load_checkpoint(args.checkpoint)
    region_set = RegionSet(config.n_regions)
    mask = _read_mask(args.mask_file, config.n_regions)
    if mask.n_masked == config.n_regions:
        raise ConfigError("the mask covers every region; at least one region must be observed")
    if mask.n_masked == 0:
        raise ConfigError("the mask has no unknown regions")
    profile = load_profile_csv(args.profile, region_set)
    known = mask.bits == 0
    if args.no_normalize:
        values, norm_mean, norm_std = np.array(profile.values), 0.0, 1.0
    else:
        values, norm_mean, norm_std = _observed_normalize(profile.values, known)
    request = InferenceRequest(values, mask, rounds=args.rounds, seed=args.seed)
    schedule = build_schedule(config.T, DEFAULTS.beta_start, DEFAULTS.beta_end)
    ens = predict(request, params, schedule)
    payload = ensemble_to_json(ens, norm_mean, norm_std)
    raw = ens.mean_prediction * norm_std + norm_mean
    raw[known] = profile.values[known]  # observed regions are echoed in their original units
    payload["mean_raw"] = raw.tolist()
    Path(args.out).write_text(json.dumps(payload) + "\n", encoding="utf-8")
    return 0


def _load_pred_vector(path, region_set):
    """Returns (values, unknown-bits or None, norm stats or None)."""
    if str(path).lower().endswith(".csv"):
        return load_profile_csv(path, region_set).values, None, None
    payload = load_prediction(path)
    mean = np.asarray(payload["mean"], dtype=np.float64)
    if mean.shape != (region_set.count,):
        raise DataError(f"{path}: prediction has {mean.size} regions, truth has {region_set.count}")
    stats = None
    if payload.get("norm_mean") is not None and payload.get("norm_std") is not None:
        stats = (float(payload["norm_mean"]), float(payload["norm_std"]))
    return mean, np.asarray(payload["mask"], dtype=np.int8), stats


def cmd_eval(args) -> int:
    _require_file(args.truth, "truth file")
    for path in args.pred:
        _require_file(path, "prediction file")
    if args.split:
        _require_file(args.split, "split file")
    with open(args.truth, encoding="utf-8") as fh:
        n_rows = sum(1 for line in fh if line.strip()) - 1
    region_set = RegionSet(max(n_rows, 2))
    truth = load_profile_csv(args.truth, region_set)
    split = load_split(args.split, region_set) if args.split else None
    task = args.task or truth.indicator_name
    reports = []
    for path in args.pred:
        pred, unknown, stats = _load_pred_vector(path, region_set)
        if split is not None:
            idx = np.array(split.test_idx)
        elif unknown is not None:
            idx = np.flatnonzero(unknown)
        else:
            idx = np.arange(region_set.count)
        target = truth.values
        if stats is not None:
            target = (target - stats[0]) / stats[1]
        reports.append(analysis.evaluate(pred[idx], target[idx], task))
    if args.aggregate or len(reports) > 1:
        agg = analysis.mean_report(reports, task)
        payload = agg.to_json()
        payload["runs"] = [r.to_json() for r in reports]
    else:
        payload = reports[0].to_json()
    _write_json(payload, args.out)
    return 0


def cmd_analyze(args) -> int:
    if args.analysis == "kde":
        _require_file(args.samples, "samples file")
        payload = load_prediction(args.samples)
        samples = np.asarray(payload["samples"], dtype=np.float64)
        if not 0 <= args.region < samples.shape[1]:
            raise ConfigError(f"--region must be in 0..{samples.shape[1] - 1}")
        if args.bandwidth is not None and not args.bandwidth > 0:
            raise ConfigError("--bandwidth must be > 0")
        column = samples[:, args.region]
        h = args.bandwidth or analysis.default_bandwidth(column)
        grid = analysis.kde_grid(column, h, args.grid)
        density = analysis.epanechnikov_kde(column, h, grid)
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["x", "density"])
            writer.writerows([repr(float(x)), repr(float(d))] for x, d in zip(grid, density))
    elif args.analysis == "scaling":
        _require_file(args.points, "points file")
        with open(args.points, encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        try:
            x = [float(r["x"]) for r in rows]
            y = [float(r["y"]) for r in rows]
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{args.points}: expected numeric columns x,y ({exc})") from exc
        _write_json(analysis.fit_scaling_law(x, y).to_json(), args.out)
    elif args.analysis == "cluster":
        _require_file(args.checkpoint, "checkpoint")
        params, config = load_checkpoint(args.checkpoint)
        if not 1 <= args.k <= config.n_regions:
            raise ConfigError(f"--k must be in 1..{config.n_regions}")
        labels, _ = analysis.kmeans(params["region_embed"].astype(np.float64), args.k, seed=args.seed)
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["region_id", "cluster"])
            writer.writerows(enumerate(labels.tolist()))
    elif args.analysis == "probe":
        for path, what in ((args.embeddings, "embeddings file"), (args.profile, "profile"), (args.split, "split file")):
            _require_file(path, what)
        ref = load_reference_embeddings(args.embeddings)
        region_set = RegionSet(ref.shape[0])
        split = load_split(args.split, region_set)
        truth = load_profile_csv(args.profile, region_set)
        train_idx, test_idx = np.array(split.train_idx), np.array(split.test_idx)
        pred = analysis.linear_probe_baseline(ref, truth.values[train_idx], train_idx, test_idx, args.ridge)
        report = analysis.evaluate(pred, truth.values[test_idx], truth.indicator_name)
        _write_json({"test_idx": test_idx.tolist(), "prediction": pred.tolist(), "report": report.to_json()}, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    config = ModelConfig(args.regions, args.dim, args.layers, args.heads, args.ref_dim, args.T)
    try:
        report = run_gradcheck(config, seed=args.seed, step=args.step, tolerance=args.tol, corrupt=args.corrupt)
    except KeyError as exc:
        raise ConfigError(str(exc)) from exc
    for name, err in report.group_errors().items():
        print(f"{name:16s} {err:.3e}  {'ok' if err < args.tol else 'FAIL'}")
    verdict = "PASS" if report.passed else "FAIL"
    print(f"{verdict}: max relative error {report.max_error:.3e} (tolerance {args.tol:g})")
    return 0 if report.passed else NumericalError.exit_code


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except UrbanICLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ArithmeticError as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return NumericalError.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
