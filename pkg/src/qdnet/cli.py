"""Command-line orchestration.

Subcommands: gen, train, sweep, eval, verify-circuit, export-kernels.
Every run writes a manifest recording the resolved parameters and content
hashes of its input files, so a run can be replayed exactly. Exit codes:
0 success, 2 usage error, 3 data error, 4 numerical failure.

The QDNET_THREADS environment variable overrides the worker count used by
internally parallel commands.
"""

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, circuit, features, network, qmath, states

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4

_NUMERICAL_ERRORS = (
    qmath.EigenSolverError,
    qmath.PositivityError,
    states.GenerationError,
    features.FeatureRealityError,
    features.DegenerateKernelError,
    network.TrainingDivergedError,
)


class UsageError(ValueError):
    pass


def _n_workers(default=1):
    value = os.environ.get("QDNET_THREADS", "")
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            raise UsageError(f"QDNET_THREADS must be an integer, got {value!r}")
    return default


def _sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir, command, params, inputs):
    manifest = {
        "command": command,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "params": params,
        "version": __version__,
    }
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def _load_dataset(path):
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    return states.read_dataset(path)


def _confusion_text(m):
    return (
        "              pred 0   pred 1\n"
        f"    true 0  {m.tn:8d} {m.fp:8d}\n"
        f"    true 1  {m.fn:8d} {m.tp:8d}"
    )


def _split_sets(coeffs, labels, seed):
    tr, va, te = network.split_indices(len(coeffs), seed)
    return (
        (coeffs[tr], labels[tr]),
        (coeffs[va], labels[va]),
        (coeffs[te], labels[te]),
    )


def _load_fixed_kernels(path):
    """Read a kernel CSV in either raw-coefficient or unit-vector form."""
    with open(path, newline="") as fh:
        header = fh.readline().strip().split(",")
    if header[2:] == ["k0", "k1", "k2", "k3"]:
        layer1, layer2 = features.read_kernels_csv(path)
        return (
            np.stack([k.k for k in layer1]),
            np.stack([k.k for k in layer2]),
        )
    if header[2:] == ["x", "y", "z"]:
        k1 = np.zeros((4, 4))
        k2 = np.zeros((4, 4))
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            for row in reader:
                target = k1 if int(row[0]) == 1 else k2
                target[int(row[1]) - 1] = [0.0] + [float(x) for x in row[2:5]]
        return k1, k2
    raise UsageError(f"{path}: unrecognized kernel CSV header {header}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen(args):
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    samples = states.generate_dataset(
        args.n,
        fraction_non_discordant=args.fraction,
        seed=args.seed,
        compute_discord=args.compute_discord,
        workers=_n_workers(),
    )
    states.write_dataset(samples, out)
    if args.csv:
        states.write_dataset_csv(samples, args.csv)
    _write_manifest(
        out.parent,
        "gen",
        {
            "n": args.n,
            "fraction": args.fraction,
            "seed": args.seed,
            "compute_discord": args.compute_discord,
            "out": str(out),
            "csv": args.csv,
        },
        [],
    )
    labels = np.array([s.label for s in samples])
    print(f"wrote {len(samples)} samples to {out}")
    print(f"labels: {np.sum(labels == 0)} non-discordant, {np.sum(labels == 1)} discordant")
    if args.compute_discord:
        qd = np.array([s.discord_value for s in samples])
        edges = np.linspace(0, max(qd.max(), 1e-9), 9)
        hist, _ = np.histogram(qd, bins=edges)
        print("discord histogram:")
        for lo, hi, count in zip(edges[:-1], edges[1:], hist):
            print(f"  [{lo:.3f}, {hi:.3f}): {count}")
    return 0


def _train_once(coeffs, labels, args, fixed=None):
    train_set, val_set, test_set = _split_sets(coeffs, labels, args.seed)
    config = network.ModelConfig(
        path_count=args.paths,
        kernels_trainable=fixed is None,
        fixed_kernels=fixed,
        seed=args.seed,
        learning_rate=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        batchnorm=not args.no_batchnorm,
    )
    model, history = network.train(config, train_set, val_set)
    metrics = network.evaluate(model, test_set)
    val_metrics = network.evaluate(model, val_set)
    return model, history, metrics, val_metrics


def cmd_train(args):
    coeffs, labels, _ = _load_dataset(args.dataset)
    fixed = _load_fixed_kernels(args.fixed_kernels) if args.fixed_kernels else None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        model, history, metrics, val_metrics = _train_once(coeffs, labels, args, fixed)
    except network.TrainingDivergedError as err:
        _write_history_csv(out_dir / "history.csv", err.history)
        print(f"error: {err} (partial history saved)", file=sys.stderr)
        raise
    ckpt = out_dir / "model.ckpt"
    network.save_checkpoint(
        model,
        ckpt,
        metadata={
            "seed": args.seed,
            "dataset": str(args.dataset),
            "dataset_sha256": _sha256(args.dataset),
            "test_metrics": metrics.to_dict(),
            "val_metrics": val_metrics.to_dict(),
            "history": history,
        },
    )
    _write_history_csv(out_dir / "history.csv", history)
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump(metrics.to_dict(), fh, indent=2, sort_keys=True)
    _write_manifest(
        out_dir,
        "train",
        {
            "dataset": str(args.dataset),
            "paths": args.paths,
            "epochs": args.epochs,
            "seed": args.seed,
            "lr": args.lr,
            "batch_size": args.batch_size,
            "no_batchnorm": args.no_batchnorm,
            "fixed_kernels": args.fixed_kernels,
            "out": str(out_dir),
        },
        [args.dataset] + ([args.fixed_kernels] if args.fixed_kernels else []),
    )
    print(f"checkpoint: {ckpt}")
    print(
        f"test accuracy {metrics.accuracy:.4f}  recall {metrics.recall:.4f}  "
        f"f1 {metrics.f1:.4f}"
    )
    return 0


def _write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc"])
        for row in history:
            writer.writerow(
                [
                    row["epoch"],
                    repr(row["lr"]),
                    repr(row["train_loss"]),
                    repr(row["train_acc"]),
                    repr(row["val_loss"]),
                    repr(row["val_acc"]),
                ]
            )


def cmd_sweep(args):
    coeffs, labels, _ = _load_dataset(args.dataset)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    train_set, val_set, test_set = _split_sets(coeffs, labels, args.seed)
    rows = []
    for l in range(args.l_min, args.l_max + 1):
        config = network.ModelConfig(
            path_count=l,
            seed=args.seed,
            epochs=args.epochs,
            learning_rate=args.lr,
            batch_size=args.batch_size,
        )
        try:
            model, _ = network.train(config, train_set, val_set)
            metrics = network.evaluate(model, test_set)
            rows.append([l, metrics.accuracy, metrics.recall, metrics.f1])
            print(
                f"l={l:2d}  accuracy {metrics.accuracy:.4f}  "
                f"recall {metrics.recall:.4f}  f1 {metrics.f1:.4f}"
            )
        except _NUMERICAL_ERRORS as err:
            rows.append([l, "nan", "nan", "nan"])
            print(f"l={l:2d}  failed: {err}", file=sys.stderr)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["l", "accuracy", "recall", "f1"])
        for row in rows:
            writer.writerow([row[0]] + [repr(x) if isinstance(x, float) else x for x in row[1:]])
    _write_manifest(
        out.parent,
        "sweep",
        {
            "dataset": str(args.dataset),
            "l_min": args.l_min,
            "l_max": args.l_max,
            "seed": args.seed,
            "epochs": args.epochs,
            "lr": args.lr,
            "batch_size": args.batch_size,
            "out": str(out),
        },
        [args.dataset],
    )
    return 0


def cmd_eval(args):
    model, metadata = network.load_checkpoint(args.checkpoint)
    coeffs, labels, _ = _load_dataset(args.dataset)
    if args.split != "all":
        seed = metadata.get("seed")
        if seed is None:
            raise UsageError("checkpoint metadata lacks a seed; cannot re-split")
        tr, va, te = network.split_indices(len(coeffs), seed)
        idx = {"train": tr, "val": va, "test": te}[args.split]
        coeffs, labels = coeffs[idx], labels[idx]
    metrics = network.evaluate(model, (coeffs, labels))
    print(_confusion_text(metrics))
    print(
        f"accuracy {metrics.accuracy:.4f}  recall {metrics.recall:.4f}  "
        f"f1 {metrics.f1:.4f}"
    )
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as fh:
            json.dump(metrics.to_dict(), fh, indent=2, sort_keys=True)
        _write_manifest(
            out.parent,
            "eval",
            {
                "checkpoint": str(args.checkpoint),
                "dataset": str(args.dataset),
                "split": args.split,
                "out": str(out),
            },
            [args.checkpoint, args.dataset],
        )
    return 0


def cmd_verify_circuit(args):
    model, _ = network.load_checkpoint(args.checkpoint)
    fmap = circuit.CircuitFeatureMap.from_kernels(model.k1, model.k2, model.paths)
    rng = np.random.default_rng(args.seed)
    rhos = [states.sample_random_state(rng) for _ in range(args.n_states)]
    coeffs = np.stack([states.to_pauli(r) for r in rhos])

    conv_feats = model.features(coeffs)
    circ_feats = np.stack([fmap.exact_features(r) for r in rhos])
    expect_feats = np.stack([fmap.expectation_features(r) for r in rhos])

    p_conv, _ = model.forward_features(conv_feats)
    p_circ, _ = model.forward_features(circ_feats)
    agree_exact = float(np.mean((p_conv >= 0.5) == (p_circ >= 0.5)))

    report = {
        "checkpoint": str(args.checkpoint),
        "n_states": args.n_states,
        "paths": [list(p) for p in model.paths],
        "n_unitary_pairs": len(model.paths),
        "max_dev_convolution_vs_circuit": float(np.max(np.abs(conv_feats - circ_feats))),
        "max_dev_expectation_vs_circuit": float(np.max(np.abs(expect_feats - circ_feats))),
        "classification_agreement_exact": agree_exact,
    }
    if args.shots:
        sampled = np.stack(
            [fmap.sampled_features(r, args.shots, seed=[args.seed, i])[0] for i, r in enumerate(rhos)]
        )
        p_samp, _ = model.forward_features(sampled)
        agree = float(np.mean((p_samp >= 0.5) == (p_conv >= 0.5)))
        n = args.n_states
        # Wilson 95% interval for the agreement rate.
        z = 1.96
        center = (agree + z * z / (2 * n)) / (1 + z * z / n)
        half = (
            z * np.sqrt(agree * (1 - agree) / n + z * z / (4 * n * n)) / (1 + z * z / n)
        )
        report.update(
            shots=args.shots,
            max_dev_sampled_vs_circuit=float(np.max(np.abs(sampled - circ_feats))),
            classification_agreement_sampled=agree,
            agreement_ci95=[float(center - half), float(center + half)],
        )

    print(f"paths: {report['n_unitary_pairs']} unitary pairs {report['paths']}")
    print(f"max |convolution - circuit| = {report['max_dev_convolution_vs_circuit']:.3e}")
    print(f"max |expectation - circuit| = {report['max_dev_expectation_vs_circuit']:.3e}")
    print(f"classification agreement (exact): {agree_exact:.4f}")
    if args.shots:
        print(
            f"classification agreement ({args.shots} shots): "
            f"{report['classification_agreement_sampled']:.4f} "
            f"(95% CI {report['agreement_ci95'][0]:.4f}..{report['agreement_ci95'][1]:.4f})"
        )
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
        _write_manifest(
            out.parent,
            "verify-circuit",
            {
                "checkpoint": str(args.checkpoint),
                "n_states": args.n_states,
                "shots": args.shots,
                "seed": args.seed,
                "out": str(out),
            },
            [args.checkpoint],
        )
    return 0


def cmd_export_kernels(args):
    model, _ = network.load_checkpoint(args.checkpoint)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    layer1 = [features.HermitianKernel(k) for k in model.k1]
    layer2 = [features.HermitianKernel(k) for k in model.k2]
    features.write_kernels_csv(layer1, layer2, out_dir / "kernels.csv")
    circuit.write_renormalized_csv(layer1, layer2, out_dir / "kernels_renormalized.csv")
    _write_manifest(
        out_dir,
        "export-kernels",
        {"checkpoint": str(args.checkpoint), "out": str(out_dir)},
        [args.checkpoint],
    )
    print(f"wrote {out_dir / 'kernels.csv'} and {out_dir / 'kernels_renormalized.csv'}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=256)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="qdnet",
        description="Quantum discord detection pipeline for two-qubit states.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a labeled dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--compute-discord", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None, help="also write a CSV mirror")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a classifier")
    p.add_argument("dataset")
    p.add_argument("--paths", type=int, default=16, help="path count l in 1..16")
    p.add_argument("--out", required=True)
    p.add_argument("--fixed-kernels", default=None, help="kernel CSV; freezes kernels")
    p.add_argument("--no-batchnorm", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train across a range of path counts")
    p.add_argument("dataset")
    p.add_argument("--l-min", type=int, default=2)
    p.add_argument("--l-max", type=int, default=15)
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--split", choices=["all", "train", "val", "test"], default="all")
    p.add_argument("--out", default=None, help="write metrics JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "verify-circuit", help="compare convolution features with circuit readout"
    )
    p.add_argument("checkpoint")
    p.add_argument("--n-states", type=int, default=1000)
    p.add_argument("--shots", type=int, default=0, help="0 means exact expectations")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_verify_circuit)

    p = sub.add_parser("export-kernels", help="export kernel tables from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_kernels)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "paths", None) is not None and not 1 <= args.paths <= 16:
        parser.error(f"--paths must be in 1..16, got {args.paths}")
    try:
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, states.DatasetFormatError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except _NUMERICAL_ERRORS as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as err:
        # remaining ValueErrors are argument validation (counts, fractions)
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
