"""Command-line entry point: ``btn generate-data | train | certify | attack``.

Exit codes: 0 ok, 2 config, 3 I/O or file format, 4 divergence,
5 certified-bound violation found by ``attack``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from fractions import Fraction
from pathlib import Path

import pydantic

from .bounds import PerturbationSpec, certify
from .config import DataConfig, RunConfig, dump_json, load_run_config
from .datagen import generate, load_dataset, save_dataset
from .metrics import certified_deviations, evaluate, gt_counts
from .numerics import FormatError
from .oracle import sample_attack
from .trainer import (
    DivergenceError,
    load_checkpoint,
    log_csv,
    model_from_checkpoint,
    new_state,
    save_checkpoint,
    state_from_checkpoint,
    train,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_UNSOUND = 0, 2, 3, 4, 5
REPORT_SCHEMA = 1


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return load_run_config(path)
    except pydantic.ValidationError as exc:
        first = exc.errors()[0]
        field = ".".join(str(p) for p in first["loc"])
        raise CliError(EXIT_CONFIG, f"config error at {field}: {first['msg']}") from None
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"config is not valid JSON: {exc}") from None
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config: {exc}") from None


def _epsilons(text: str) -> list[float]:
    """Comma-separated list; entries may be fractions such as ``3/255``."""
    try:
        return [float(Fraction(t.strip())) for t in text.split(",") if t.strip()]
    except (ValueError, ZeroDivisionError):
        raise CliError(EXIT_CONFIG, f"cannot parse epsilon list {text!r}") from None


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _report_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _load_model(path):
    ck = load_checkpoint(path)
    digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
    return ck, model_from_checkpoint(ck), digest


def _split(data_dir, name: str):
    return load_dataset(Path(data_dir) / name)


# -- commands -----------------------------------------------------------------


def cmd_generate(args) -> int:
    cfg = _config(args.config)
    data: DataConfig = cfg.data
    out = Path(args.out)
    train_ds = generate(data.scene, data.n_train, stream=0)
    test_ds = generate(data.scene, data.n_test, stream=1)
    save_dataset(train_ds, out / "train")
    save_dataset(test_ds, out / "test")
    _write(out / "config.json", dump_json(cfg) + "\n")
    summary = {
        "train": {"n": len(train_ds), "counts": [s.true_count for s in train_ds.samples]},
        "test": {"n": len(test_ds), "counts": [s.true_count for s in test_ds.samples]},
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, val_ds = _split(args.data, "train"), _split(args.data, "test")
    if args.resume:
        ck = load_checkpoint(args.resume)
        cfg = _config(args.config) if args.config else ck.config
        state = state_from_checkpoint(ck, cfg)
    else:
        cfg = _config(args.config)
        state = new_state(cfg)
    _write(out / "config.json", dump_json(cfg) + "\n")
    hashes = {}

    def on_epoch_end(st, improved):
        _write(out / "epochs.csv", log_csv(st.log))
        if improved:
            hashes["best"] = save_checkpoint(st, out / "best.btnc")
        if args.save_every and st.epoch % args.save_every == 0:
            save_checkpoint(st, out / f"epoch_{st.epoch:04d}.btnc")

    try:
        train(state, train_ds, val_ds, until=args.until, on_epoch_end=on_epoch_end)
    finally:
        _write(out / "epochs.csv", log_csv(state.log))
    hashes["final"] = save_checkpoint(state, out / "final.btnc")
    summary = {
        "epochs_run": state.epoch,
        "best_epoch": state.best_epoch,
        "best_val_ct_mae": state.best_score,
        "final_sha256": hashes["final"],
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_certify(args) -> int:
    ck, model, digest = _load_model(args.ckpt)
    ds = _split(args.data, args.split)
    if args.limit:
        ds = ds.subset(range(min(args.limit, len(ds))))
    gts = gt_counts(ds)
    results = []
    for eps in _epsilons(args.eps):
        spec = PerturbationSpec(args.norm, eps)
        rep = evaluate(model, ds, spec)
        tight, pix, _, c_lo, c_up = certified_deviations(model, ds, spec)
        entry = {"epsilon": eps, "eval": rep.to_dict()}
        if args.norm == "linf":
            entry["theorem1_bound"] = certify(model, ds.samples[0].image, spec).theorem1_bound
        entry["images"] = [
            {
                "index": i,
                "gt_count": float(gts[i]),
                "count_lower": float(c_lo[i]),
                "count_upper": float(c_up[i]),
                "tight_deviation": float(tight[i]),
                "pixel_deviation": float(pix[i]),
            }
            for i in range(len(ds))
        ]
        results.append(entry)
    report = {
        "schema": REPORT_SCHEMA,
        "command": "certify",
        "checkpoint": {"path_name": Path(args.ckpt).name, "sha256": digest, "epoch": ck.epoch},
        "config": ck.config.model_dump(mode="json"),
        "split": args.split,
        "norm": args.norm,
        "results": results,
    }
    _write(Path(args.out), _report_json(report))
    return EXIT_OK


def cmd_attack(args) -> int:
    ck, model, digest = _load_model(args.ckpt)
    ds = _split(args.data, args.split)
    if args.limit:
        ds = ds.subset(range(min(args.limit, len(ds))))
    (eps,) = _epsilons(args.eps)
    spec = PerturbationSpec(args.norm, eps)
    images, total_viol = [], 0
    for i, s in enumerate(ds.samples):
        cert = certify(model, s.image, spec)
        res = sample_attack(model, s.image, spec, args.samples, seed=args.seed + i, cert=cert)
        total_viol += res.violations
        images.append(
            {
                "index": i,
                "count_lower": cert.count_lower,
                "count_upper": cert.count_upper,
                **res.digest(),
            }
        )
    report = {
        "schema": REPORT_SCHEMA,
        "command": "attack",
        "checkpoint": {"path_name": Path(args.ckpt).name, "sha256": digest, "epoch": ck.epoch},
        "config": ck.config.model_dump(mode="json"),
        "split": args.split,
        "norm": args.norm,
        "epsilon": eps,
        "samples": args.samples,
        "violations": total_viol,
        "images": images,
    }
    _write(Path(args.out), _report_json(report))
    if total_viol:
        print(f"soundness violation: {total_viol} sampled outputs outside certified bounds", file=sys.stderr)
        return EXIT_UNSOUND
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="btn", description="Certified training and bounds for counting CNNs.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic train/test dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="staged certified training")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="continue from a checkpoint")
    t.add_argument("--until", type=int, help="stop after this many epochs in total")
    t.add_argument("--save-every", type=int, default=0, help="also keep a checkpoint every K epochs")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("certify", cmd_certify, "certified metrics report"),
        ("attack", cmd_attack, "sampled attack against certified bounds"),
    ):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--ckpt", required=True)
        c.add_argument("--data", required=True)
        c.add_argument("--eps", required=True)
        c.add_argument("--norm", choices=["linf", "l2"], default="linf")
        c.add_argument("--out", required=True)
        c.add_argument("--split", choices=["train", "test"], default="test")
        c.add_argument("--limit", type=int, default=0, help="only the first N images")
        c.set_defaults(func=func)
        if name == "attack":
            c.add_argument("--samples", type=int, default=1000)
            c.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
