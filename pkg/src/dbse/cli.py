"""``dbse`` command line: synth, train, eval, export-embeddings.

Exit codes: 0 success, 2 configuration/input error, 3 numerical failure,
4 checkpoint/data incompatibility.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import evaluation as ev
from . import plotting
from .config import ConfigError, RunConfig
from .model import Model
from .serialization import FormatError
from .synthdata import DataError, SequenceDataset, SyntheticSpec, export_csv, generate, load_csv, load_dataset, save_dataset, split
from .training import (Checkpoint, NumericalError, checkpoint_path, load_checkpoint, new_state, resolve_config,
                       save_checkpoint, train, write_history)

log = logging.getLogger("dbse")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_COMPAT = 0, 2, 3, 4

ABLATIONS = {
    "none": {},
    "no-loss": {"no_static_loss": True},
    "no-sub": {"no_subtraction": True},
    "no-both": {"no_static_loss": True, "no_subtraction": True},
}
ANCHORS = {"first": "first", "middle": "middle", "last": "last", "random": "random_fixed", "rob": "random_on_batch"}
PROTOCOLS = ("leakage-gen", "leakage-latent", "swap", "metrics", "eer")


class CompatError(Exception):
    pass


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig(seed=0)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return RunConfig.load(p)


def synthetic_spec(cfg: RunConfig) -> SyntheticSpec:
    return SyntheticSpec(cfg.n_sequences, cfg.T, cfg.d, cfg.n_static, cfg.n_dynamic, cfg.noise, cfg.data_seed)


def load_data(path, cfg: RunConfig) -> SequenceDataset:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"data file not found: {p}")
    if p.suffix.lower() == ".csv":
        cols = [c.strip() for c in cfg.csv_columns.split(",") if c.strip()] or None
        return load_csv(p, cfg.T, cols, cfg.csv_label_column or None, cfg.csv_label_kind)
    try:
        return load_dataset(p)
    except FormatError as exc:
        raise DataError(str(exc)) from None


def data_split(ds: SequenceDataset, cfg: RunConfig):
    if cfg.train_fraction >= 1.0:
        return ds, ds.subset(np.zeros(0, dtype=int))
    return split(ds, (cfg.train_fraction, 1.0 - cfg.train_fraction), cfg.data_seed)


# -- commands ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = load_config(args.spec)
    ds = generate(synthetic_spec(cfg))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    if args.csv:
        export_csv(ds, out.with_suffix(".csv"))
    print(f"wrote {len(ds)} sequences to {out} (data digest {ds.digest()})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config).with_(**ABLATIONS[args.ablation])
    if args.anchor:
        cfg = cfg.with_(anchor_policy=ANCHORS[args.anchor])
    cfg = resolve_config(cfg)
    ds = load_data(args.data, cfg)
    if (ds.T, ds.d) != (cfg.T, cfg.d):
        raise CompatError(f"dataset has T={ds.T}, d={ds.d}; config expects T={cfg.T}, d={cfg.d}")
    train_ds, _ = data_split(ds, cfg)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    digest = ds.digest()

    state = new_state(cfg)
    if args.resume:
        ck = load_checkpoint(args.resume)
        if ck.config.digest() != cfg.digest():
            raise CompatError(f"{args.resume}: config digest {ck.config.digest()} differs from {cfg.digest()}")
        state = ck.state

    def on_epoch_end(st):
        if cfg.checkpoint_every and st.epoch % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path(out_dir, st.epoch), Checkpoint(cfg, st, digest))
            save_checkpoint(checkpoint_path(out_dir), Checkpoint(cfg, st, digest))

    try:
        state = train(cfg, train_ds, state, on_epoch_end)
    except NumericalError as exc:
        print(f"numerical failure: {exc} (last checkpoint left in place)", file=sys.stderr)
        if state.history:
            write_history(state.history, out_dir / "history.csv")
        return EXIT_NUMERIC
    save_checkpoint(checkpoint_path(out_dir), Checkpoint(cfg, state, digest))
    (out_dir / "config.txt").write_text(cfg.canonical() + "\n", encoding="utf-8")
    write_history(state.history, out_dir / "history.csv")
    if state.history:
        plotting.plot_history(state.history, out_dir / "history.png")
    print(f"trained {state.epoch} epochs; config digest {cfg.digest()}; checkpoint {checkpoint_path(out_dir)}")
    return EXIT_OK


def _load_pair(args):
    ck = load_checkpoint(args.checkpoint)
    cfg = ck.config
    ds = load_data(args.data, cfg)
    if (ds.T, ds.d) != (cfg.T, cfg.d):
        raise CompatError(f"data has T={ds.T}, d={ds.d} but checkpoint config {cfg.digest()} expects T={cfg.T}, d={cfg.d}")
    model = Model(cfg.model_config(), ck.state.params)
    model.epochs_trained = ck.state.epoch
    return cfg, ds, model


def cmd_eval(args) -> int:
    if args.protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {args.protocol!r}; choose from {', '.join(PROTOCOLS)}")
    cfg, ds, model = _load_pair(args)
    dig, seed = cfg.digest(), cfg.eval_seed
    train_ds, test_ds = data_split(ds, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stem = out.with_suffix("")

    def judges():
        return ev.train_judges(train_ds, test_ds, cfg.judge_hidden, cfg.judge_iters, seed)

    if args.protocol == "leakage-gen":
        j = judges()
        reports = [ev.leakage_generation(model, j, test_ds, m, seed, dig) for m in ("resample_static", "resample_dynamic")]
        reports.append(ev.EvalReport("judge", {"static_test_acc": j.static.test_accuracy,
                                               "dynamic_test_acc": j.dynamic.test_accuracy}, seed, dig))
    elif args.protocol == "leakage-latent":
        # the protocol does its own 80-20 split over every sequence it is given
        reports = [ev.leakage_latent(model, ds, seed, cfg.judge_hidden, cfg.judge_iters, dig, cfg.latent_codes)]
    elif args.protocol == "metrics":
        reports = [ev.generation_metrics(model, judges(), test_ds, seed, dig)]
    elif args.protocol == "eer":
        reports = [ev.eer_protocol(model, test_ds, seed=seed, config_digest=dig, codes=cfg.latent_codes)]
    else:
        rep, sw = ev.swap_fidelity(model, judges(), test_ds, cfg.n_swap_pairs, seed, dig)
        reports = [rep]
        sub = SequenceDataset(sw["swap1"], test_ds.static_labels[sw["pairs"][:, 0]], test_ds.dynamic_labels[sw["pairs"][:, 1]])
        export_csv(sub, f"{stem}.sequences.csv")
        plotting.plot_swaps(sw["x1"], sw["x2"], sw["swap1"], sw["swap2"], f"{stem}.swaps.png")
    ev.write_reports(reports, out)
    for i, rep in enumerate(reports):
        plotting.plot_report_bars(rep, f"{stem}.{i}.png" if len(reports) > 1 else f"{stem}.png")
        for k, v in rep.metrics.items():
            print(f"{rep.protocol},{k},{v:.6g}")
    return EXIT_OK


def cmd_export(args) -> int:
    _, ds, model = _load_pair(args)
    if len(ds) == 0:
        raise DataError("dataset is empty")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = ev.export_embeddings(model, ds, out)
    if ds.static_labels is not None and ds.dynamic_labels is not None:
        s, dp = ev.latent_codes(model, ds)
        plotting.plot_embeddings(s, dp, ds.static_labels, ds.dynamic_labels, out.with_suffix(".png"))
    print(f"wrote {n} embeddings to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dbse", description="Static/dynamic sequence disentanglement toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a labelled synthetic dataset")
    s.add_argument("--spec", help="key=value config file (synthetic keys are used)")
    s.add_argument("--out", required=True)
    s.add_argument("--csv", action="store_true", help="also write a long-format CSV copy")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--ablation", choices=sorted(ABLATIONS), default="none")
    t.add_argument("--anchor", choices=sorted(ANCHORS))
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="run an evaluation protocol")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--protocol", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-embeddings", help="write per-sequence latent codes")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        threads = int(os.environ.get("DBSE_THREADS", "1"))
    except ValueError:
        print("error: DBSE_THREADS must be an integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with threadpool_limits(limits=max(1, threads)):
            return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CompatError, FormatError) as exc:
        print(f"incompatible input: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (ConfigError, DataError, ev.EvalError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
