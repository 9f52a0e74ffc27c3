"""Command-line entry point: ``fmts <command> ...``.

Exit codes: 0 success, 1 usage/config, 2 ingestion, 3 numeric divergence,
4 contract violation. Relative output paths resolve against ``--output-dir``
(default: $FMTS_OUTPUT_DIR, else the working directory).
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
import warnings
from dataclasses import replace

import numpy as np

from . import data as D
from . import metrics as M
from .errors import ConfigError, ContractError, DomainError, FmtsError, IngestionError, ShapeError
from .model import init_params
from .persistence import Checkpoint, RunConfig, load_checkpoint, load_config, save_checkpoint
from .sampling import (DEFAULT_ALPHA, DEFAULT_K, DEFAULT_STEPS, ConditionSpec, build_mask, power_schedule,
                       sample_conditional, sample_unconditional, shifted_schedule, uniform_schedule)
from .tensor import make_rng
from .training import train

OUTPUT_ENV = "FMTS_OUTPUT_DIR"

# sub-stream tags so data, split and init never share a stream with training
_DATA_STREAM, _SPLIT_STREAM, _INIT_STREAM = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _log(msg):
    print(msg, file=sys.stderr)


def _out_path(args, path):
    if os.path.isabs(path):
        return path
    return os.path.join(args.output_dir, path)


# --------------------------------------------------------------------------
# data plumbing shared with the library user


def build_dataset(cfg: RunConfig) -> D.SeriesBatch:
    spec = cfg.dataset
    rng = make_rng([cfg.seed, _DATA_STREAM])
    if spec.kind == "sines":
        return D.gen_sines(spec.n, spec.length, spec.channels, rng)
    if spec.kind == "ar1":
        return D.gen_ar1(spec.n, spec.length, spec.channels, spec.phi, rng)
    return D.load_csv_windows(spec.path, spec.length, spec.stride)


def read_windows(path, length=None) -> D.SeriesBatch:
    """Long-form window files (``window,step,...``) or a plain table cut into
    non-overlapping windows of ``length`` rows."""
    names, table = D.read_csv_table(path)
    if names[:2] == ["window", "step"]:
        batch = D.read_windows_long(path)
        if length is not None and batch.length != length and len(batch):
            raise ShapeError(f"{path}: windows have {batch.length} steps, expected {length}")
        return batch
    if length is None:
        length = table.shape[0]
    if table.shape[0] < length or table.shape[0] % length:
        raise ShapeError(f"{path}: {table.shape[0]} rows is not a whole number of {length}-step windows")
    return D.SeriesBatch(D.make_windows(table, length, length), names)


def _parse_mask(spec: str, shape) -> np.ndarray:
    """``forecast:<m>``, ``missing:<ratio>:<seed>`` or a 0/1 CSV (one window, or long form)."""
    n, length, channels = shape
    kind, _, rest = spec.partition(":")
    try:
        if kind == "forecast" and rest:
            return build_mask("forecast", length, channels, m=int(rest), n=n)
        if kind == "missing" and rest:
            ratio, _, seed = rest.partition(":")
            if not seed:
                raise ConfigError("missing mask spec is missing:<ratio>:<seed>")
            return build_mask("random_missing", length, channels, make_rng(int(seed)), ratio=float(ratio), n=n)
    except DomainError:
        raise  # well-formed spec that does not fit the windows
    except ValueError as exc:
        raise ConfigError(f"bad mask spec {spec!r}: {exc}") from None
    if not os.path.exists(spec):
        raise ConfigError(f"mask spec {spec!r} is neither forecast:<m>, missing:<ratio>:<seed> nor a file")
    names, table = D.read_csv_table(spec)
    if not np.all(np.isin(table, (0.0, 1.0))):
        raise IngestionError(f"{spec}: mask cells must be 0 or 1")
    if names[:2] == ["window", "step"]:
        mask = D.read_windows_long(spec).values > 0.5
    else:
        mask = (table > 0.5)[None]
    if mask.shape[1:] != (length, channels) or mask.shape[0] not in (1, n):
        raise ContractError(f"mask shape {mask.shape} does not fit input windows {shape}")
    return np.broadcast_to(mask, shape).copy()


def _load_model(path, length=None, channels=None) -> Checkpoint:
    ckpt = load_checkpoint(path)
    cfg = ckpt.config
    if length is not None and length != cfg.series_length:
        raise ContractError(f"checkpoint generates {cfg.series_length}-step windows, requested {length}")
    if channels is not None and channels != cfg.channels:
        raise ContractError(f"checkpoint has {cfg.channels} channels, requested {channels}")
    return ckpt


def _to_model_space(ckpt, values):
    if ckpt.normalization is None:
        return values
    return D.normalize(values, ckpt.normalization)[0]


def _from_model_space(ckpt, values):
    if ckpt.normalization is None:
        return values
    return D.denormalize(values, ckpt.normalization)


def _write_samples(path, batch: D.SeriesBatch, fmt: str):
    if fmt == "split":
        D.write_windows_split(path, batch)
    else:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        D.write_windows_long(path, batch)


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.output_dir_given:
        cfg.output_dir = args.output_dir
    batch = build_dataset(cfg)
    model_cfg = cfg.model
    if batch.channels != model_cfg.channels or batch.length != model_cfg.series_length:
        model_cfg = replace(model_cfg, channels=batch.channels, series_length=batch.length).validate()
    train_set, test_set = D.train_test_split(batch, make_rng([cfg.seed, _SPLIT_STREAM]))
    if len(train_set) == 0:
        raise ContractError("training split is empty; provide more windows")
    norm_train, state = D.normalize(train_set)
    params = init_params(model_cfg, make_rng([cfg.seed, _INIT_STREAM])).astype(np.float32)

    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    D.write_windows_long(os.path.join(out, "test_windows.csv"), test_set)

    def checkpoint_fn(step, p, _opt):
        save_checkpoint(os.path.join(out, f"step_{step:07d}.ckpt"), Checkpoint(p, state, step, None, batch.channel_names))

    log = []

    def log_fn(step, loss, ms):
        log.append((step, loss, ms))
        if step % max(1, args.log_every) == 0:
            _log(f"step {step} loss {loss:.6f} ({ms:.1f} ms)")

    try:
        report = train(params, norm_train.values.astype(np.float32), cfg.train, checkpoint_fn, log_fn)
    finally:
        with open(os.path.join(out, "loss.tsv"), "w", encoding="utf-8") as fh:
            fh.write("step\tloss\twall_ms\n")
            fh.writelines(f"{s}\t{v!r}\t{ms:.3f}\n" for s, v, ms in log)
    final = Checkpoint(report.params, state, report.steps, report.rng_state, batch.channel_names)
    save_checkpoint(os.path.join(out, "final.ckpt"), final)
    _log(f"wrote {os.path.join(out, 'final.ckpt')}")
    return 0


def cmd_generate(args) -> int:
    ckpt = _load_model(args.checkpoint, args.length, args.channels)
    cfg = ckpt.config
    if args.n < 0:
        raise ConfigError("--n must be >= 0")
    schedule = shifted_schedule(args.steps, args.alpha)
    z = sample_unconditional(ckpt.params, args.n, schedule, make_rng(args.seed))
    values = _from_model_space(ckpt, np.clip(z.astype(np.float64), -1.0, 1.0))
    names = args.channel_names.split(",") if args.channel_names else ckpt.channel_names
    batch = D.SeriesBatch(values.reshape(args.n, cfg.series_length, cfg.channels), names)
    _write_samples(_out_path(args, args.out), batch, args.format)
    return 0


def _conditional(args, ckpt, batch: D.SeriesBatch, mask: np.ndarray, out_name: str) -> int:
    y = _to_model_space(ckpt, batch.values)
    if not np.any(mask) or np.all(mask):
        raise ContractError("mask must observe some but not all cells of each window")
    cond = ConditionSpec(y=y, mask=mask, steps=args.steps, k=args.k, seed=args.seed)
    z = sample_conditional(ckpt.params, cond)
    filled = _from_model_space(ckpt, np.clip(z.astype(np.float64), -1.0, 1.0))
    filled[mask] = batch.values[mask]  # observed cells verbatim
    result = D.SeriesBatch(filled, batch.channel_names)
    path = _out_path(args, out_name)
    _write_samples(path, result, args.format)
    if args.truth:
        truth = read_windows(args.truth, batch.length)
        if truth.values.shape != filled.shape:
            raise ContractError(f"truth windows {truth.values.shape} do not match input {filled.shape}")
        sq = (filled - truth.values) ** 2
        hidden = ~mask
        with open(path + ".mse.tsv", "w", encoding="utf-8") as fh:
            fh.write("window\tmissing_cells\tmse\n")
            for i in range(len(filled)):
                cells = int(hidden[i].sum())
                fh.write(f"{i}\t{cells}\t{float(sq[i][hidden[i]].mean())!r}\n")
            fh.write(f"all\t{int(hidden.sum())}\t{float(sq[hidden].mean())!r}\n")
    return 0


def cmd_impute(args) -> int:
    ckpt = _load_model(args.checkpoint)
    batch = read_windows(args.input, ckpt.config.series_length)
    if batch.channels != ckpt.config.channels:
        raise ContractError(f"input has {batch.channels} channels, checkpoint has {ckpt.config.channels}")
    mask = _parse_mask(args.mask, batch.values.shape)
    return _conditional(args, ckpt, batch, mask, args.out)


def cmd_forecast(args) -> int:
    length = args.m + args.horizon
    ckpt = _load_model(args.checkpoint, length)
    if args.m < 1 or args.horizon < 1:
        raise ConfigError("--m and --horizon must be >= 1")
    names, table = D.read_csv_table(args.input)
    if names[:2] == ["window", "step"]:
        batch = D.read_windows_long(args.input)
    else:
        batch = D.SeriesBatch(table[None], names)
    if batch.length == args.m:
        pad = np.zeros((len(batch), args.horizon, batch.channels))
        batch = D.SeriesBatch(np.concatenate([batch.values, pad], axis=1), batch.channel_names)
    elif batch.length != length:
        raise ContractError(f"forecast input needs {args.m} or {length} steps per window, got {batch.length}")
    if batch.channels != ckpt.config.channels:
        raise ContractError(f"input has {batch.channels} channels, checkpoint has {ckpt.config.channels}")
    mask = build_mask("forecast", length, batch.channels, m=args.m, n=len(batch))
    return _conditional(args, ckpt, batch, mask, args.out)


def _real_source(spec: str, like: np.ndarray, seed: int) -> np.ndarray:
    if os.path.exists(spec):
        return read_windows(spec, like.shape[1]).values
    kind, _, rest = spec.partition(":")
    n, length, channels = like.shape
    rng = make_rng([seed, _DATA_STREAM])
    if kind == "sines":
        return D.gen_sines(n, length, channels, rng).values
    if kind == "ar1":
        return D.gen_ar1(n, length, channels, float(rest or 0.8), rng).values
    raise ConfigError(f"real source {spec!r} is neither a file nor sines / ar1:<phi>")


def cmd_eval(args) -> int:
    fake = read_windows(args.fake).values
    real = _real_source(args.real, fake, args.seed)
    if real.shape[1:] != fake.shape[1:]:
        raise ContractError(f"real windows {real.shape[1:]} and fake windows {fake.shape[1:]} differ")
    n = min(len(real), len(fake))
    if len(real) != len(fake):
        _log(f"balancing both sets to their first {n} windows")
    real, fake = real[:n], fake[:n]
    # one scaling fitted on the real set so the post-hoc networks see [-1, 1]-ish inputs
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        real, state = D.normalize(real)
    fake, _ = D.normalize(fake, state)
    rng = make_rng(args.seed)
    reports = []
    for name in args.metrics.split(","):
        if name == "discriminative":
            reports.append(M.discriminative_score(real, fake, rng, repeats=args.repeats))
        elif name == "predictive":
            reports.append(M.predictive_score(real, fake, rng, repeats=args.repeats))
        elif name == "correlational":
            if real.shape[2] < 2:
                _log("skipping correlational score: needs at least two channels")
                continue
            reports.append(M.correlational_score(real, fake))
        elif name == "feature_fid":
            reports.append(M.feature_fid(real, fake))
        else:
            raise ConfigError(f"unknown metric {name!r}")
    table = M.format_table(reports)
    if args.out:
        path = _out_path(args, args.out)
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(table)
    sys.stdout.write(table)
    return 0


def cmd_schedule_dump(args) -> int:
    uni = uniform_schedule(args.steps).values
    shifted = shifted_schedule(args.steps, args.alpha).values
    power = power_schedule(args.steps, args.k).values
    path = _out_path(args, args.out)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "t_uniform", "t_shifted", "t_power"])
        for i in range(len(uni)):
            w.writerow([i, repr(float(uni[i])), repr(float(shifted[i])), repr(float(power[i]))])
    return 0


def cmd_pca_export(args) -> int:
    real = read_windows(args.real).values
    fake = read_windows(args.fake, real.shape[1]).values
    proj = M.pca_project(real, fake)
    path = _out_path(args, args.out)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["set", "window", "pc1", "pc2"])
        for label, pts in (("real", proj.real), ("fake", proj.fake)):
            for i, (a, b) in enumerate(pts):
                w.writerow([label, i, repr(float(a)), repr(float(b))])
    ratio = proj.explained_ratio
    _log(f"explained variance: pc1 {ratio[0]:.4f}, pc2 {ratio[1]:.4f}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="fmts", description="Rectified-flow time series generation, imputation and forecasting.",
                     formatter_class=fmt)
    parser.add_argument("--output-dir", default=None,
                        help=f"directory for relative output paths (default: ${OUTPUT_ENV} or the working directory)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.set_defaults(func=func)
        return p

    p = add("train", cmd_train, "train a velocity model from a key = value config file")
    p.add_argument("config")
    p.add_argument("--log-every", type=int, default=100, help="print the loss every this many steps")

    def sampler_flags(p, conditional):
        p.add_argument("--steps", "-N", type=int, default=DEFAULT_STEPS, help="number of sampling steps N")
        if conditional:
            p.add_argument("--k", type=float, default=DEFAULT_K, help="time power k")
        else:
            p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA, help="timestep shift alpha")
        p.add_argument("--seed", type=int, default=0, help="sampling seed")
        p.add_argument("--format", choices=("long", "split"), default="long",
                       help="long: one file with window,step columns; split: a directory with one CSV per window")

    p = add("generate", cmd_generate, "draw unconditional samples from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--n", type=int, default=100, help="number of windows")
    p.add_argument("--out", default="samples.csv")
    p.add_argument("--length", type=int, default=None, help="expected window length (checked against the checkpoint)")
    p.add_argument("--channels", type=int, default=None, help="expected channel count (checked against the checkpoint)")
    p.add_argument("--channel-names", default=None, help="comma-separated CSV header names")
    sampler_flags(p, conditional=False)

    p = add("impute", cmd_impute, "fill unobserved cells of input windows")
    p.add_argument("checkpoint")
    p.add_argument("input", help="long-form windows CSV, or a plain table cut into model-length windows")
    p.add_argument("--mask", required=True, help="forecast:<m> | missing:<ratio>:<seed> | path to a 0/1 mask CSV")
    p.add_argument("--truth", default=None, help="ground-truth windows; writes <out>.mse.tsv with missing-cell MSE")
    p.add_argument("--out", default="imputed.csv")
    sampler_flags(p, conditional=True)

    p = add("forecast", cmd_forecast, "extend input windows by a horizon")
    p.add_argument("checkpoint")
    p.add_argument("input", help="windows of m (history only) or m + horizon steps")
    p.add_argument("--m", type=int, required=True, help="observed history length")
    p.add_argument("--horizon", type=int, required=True, help="steps to forecast")
    p.add_argument("--truth", default=None, help="ground-truth windows; writes <out>.mse.tsv")
    p.add_argument("--out", default="forecast.csv")
    sampler_flags(p, conditional=True)

    p = add("eval", cmd_eval, "score fake windows against real ones")
    p.add_argument("real", help="windows CSV, or a generator: sines | ar1:<phi>")
    p.add_argument("fake", help="windows CSV")
    p.add_argument("--repeats", type=int, default=M.REPEATS)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--metrics", default="discriminative,predictive,correlational,feature_fid")
    p.add_argument("--out", default=None, help="also write the table here")

    p = add("schedule-dump", cmd_schedule_dump, "write the uniform, shifted and power time grids")
    p.add_argument("--steps", "-N", type=int, default=DEFAULT_STEPS, help="number of steps N")
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA, help="timestep shift alpha")
    p.add_argument("--k", type=float, default=DEFAULT_K, help="time power k")
    p.add_argument("--out", default="schedule.csv")

    p = add("pca-export", cmd_pca_export, "project real and fake windows on the real top-2 principal axes")
    p.add_argument("real")
    p.add_argument("fake")
    p.add_argument("--out", default="pca.csv")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        args.output_dir_given = args.output_dir is not None
        if args.output_dir is None:
            args.output_dir = os.environ.get(OUTPUT_ENV) or "."
        return args.func(args)
    except FmtsError as exc:
        _log(f"error: {exc}")
        return exc.exit_code
    except SystemExit as exc:  # --help
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
