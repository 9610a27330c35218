"""Command-line entry point: ``rtsunet <command> ...``.

Commands: phantom, train, infer, eval, probe, complexity.  Each exits with
status 1 when it reports an error and 0 otherwise.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import PhantomParams, Volume, load_labels, load_volume, params_dict, phantom, postprocess, preprocess, save_volume
from .metrics import report

log = logging.getLogger("rtsunet")


class CommandError(Exception):
    pass


def _ints(text: str, n: int = 3, what: str = "value") -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"{what} must be {n} comma-separated integers, got {text!r}") from None
    if len(vals) != n:
        raise argparse.ArgumentTypeError(f"{what} must be {n} comma-separated integers, got {text!r}")
    return vals


# phantom --------------------------------------------------------------------


def cmd_phantom(args) -> int:
    params = PhantomParams.from_text(Path(args.params).read_text()) if args.params else PhantomParams()
    if args.dims:
        params = PhantomParams(**{**params_dict(params), "dims": args.dims})
    out = Path(args.out)
    try:
        (out / "scans").mkdir(parents=True, exist_ok=True)
        (out / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"cannot write to {out}: {exc}") from None
    rows = []
    for i in range(args.count):
        seed = args.seed + i
        case = f"case_{seed:04d}"
        scan, labels = phantom(seed, params)
        save_volume(out / "scans" / f"{case}.mhd", scan)
        save_volume(out / "labels" / f"{case}.mhd", labels)
        rows.append({"id": case, "scan": f"scans/{case}.mhd", "labels": f"labels/{case}.mhd", "seed": seed})
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["id", "scan", "labels", "seed"])
        w.writeheader()
        w.writerows(rows)
    (out / "phantom_params.json").write_text(json.dumps(params_dict(params), indent=2) + "\n")
    print(f"wrote {len(rows)} phantoms to {out}")
    return 0


# train ----------------------------------------------------------------------


def cmd_train(args) -> int:
    from .plotting import loss_curve
    from .training import PAPER_LR, RunConfig, load_examples, smoothed, train

    text = Path(args.config).read_text() if args.config else ""
    try:
        cfg = RunConfig.from_text(text)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    if args.paper_lr:
        cfg.lr = PAPER_LR
    if args.seed is not None:
        cfg.seed = args.seed
    if args.steps is not None:
        cfg.steps = args.steps
    bad = cfg.validate()
    if bad:
        raise CommandError("invalid run config:\n  " + "\n  ".join(bad))
    try:
        examples = load_examples(args.data, cfg.in_plane, torch.float32 if cfg.dtype == "float32" else torch.float64)
    except FileNotFoundError as exc:
        raise CommandError(str(exc)) from None
    out = Path(args.out)
    t0 = time.time()

    def progress(row):
        if row["step"] % 25 == 0 or row["step"] == cfg.steps - 1:
            print(f"step {row['step']:5d}  loss {row['total']:.4f}  k {row['k_fraction']:.3f}  {time.time() - t0:.0f}s", flush=True)

    _, rows = train(cfg, examples, out, progress)
    loss_curve(rows, out / "loss_curve.png")
    summary = {
        "config": cfg.__dict__,
        "examples": len(examples),
        "seconds": round(time.time() - t0, 1),
        "final_loss": rows[-1]["total"],
        "smoothed_loss": smoothed([r["total"] for r in rows]).tolist(),
    }
    (out / "run.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"checkpoint {out / 'model.rtsu'}, log {out / 'loss_log.csv'}")
    return 0


# infer ----------------------------------------------------------------------


def _load(path, dtype=torch.float32):
    from .training import load_model

    try:
        return load_model(path, dtype)
    except FileNotFoundError:
        raise CommandError(f"{path}: checkpoint not found") from None
    except ValueError as exc:
        raise CommandError(str(exc)) from None


def _read_scan(path) -> Volume:
    try:
        return load_volume(path)
    except FileNotFoundError:
        raise CommandError(f"{path}: scan not found") from None
    except ValueError as exc:
        raise CommandError(str(exc)) from None


def segment(model, meta, scan: Volume) -> tuple[np.ndarray, dict]:
    """Preprocess, run the cascade, map labels back; returns labels and timings."""
    t0 = time.perf_counter()
    x, record = preprocess(scan, int(meta.get("in_plane", 256)))
    x = x.to(torch.float32)
    t1 = time.perf_counter()
    with torch.no_grad():
        out = model.forward_full(x)
    t2 = time.perf_counter()
    labels = postprocess(out.labels[0], record)
    t3 = time.perf_counter()
    return labels, {"preprocess_s": t1 - t0, "inference_s": t2 - t1, "postprocess_s": t3 - t2}


def cmd_infer(args) -> int:
    model, meta = _load(args.checkpoint)
    scan = _read_scan(args.input)
    labels, timing = segment(model, meta, scan)
    save_volume(args.out, Volume(labels.astype(np.uint8), scan.spacing))
    print(
        f"pre-processing {timing['preprocess_s']:.2f}s, inference {timing['inference_s']:.2f}s, "
        f"post-processing {timing['postprocess_s']:.2f}s"
    )
    return 0


# eval -----------------------------------------------------------------------


def _reference_files(ref_dir: Path) -> dict[str, Path]:
    manifest = ref_dir / "manifest.csv"
    if manifest.exists():
        with open(manifest, newline="") as fh:
            return {row["id"]: ref_dir / row["labels"] for row in csv.DictReader(fh)}
    return {p.stem: p for p in sorted(ref_dir.glob("*.mhd"))}


def cmd_eval(args) -> int:
    from .plotting import iou_bars

    ref_dir, pred_dir, out = Path(args.ref), Path(args.pred), Path(args.out)
    refs = _reference_files(ref_dir)
    if not refs:
        raise CommandError(f"{ref_dir}: no reference label volumes")
    per_scan, errors = {}, []
    for case, ref_path in refs.items():
        pred_path = pred_dir / f"{case}.mhd"
        if not pred_path.exists():
            errors.append(f"{case}: prediction {pred_path} missing")
            continue
        try:
            ref, pred = load_labels(ref_path), load_labels(pred_path)
            per_scan[case] = report(pred.data, ref.data, ref.spacing)
        except (ValueError, FileNotFoundError) as exc:
            errors.append(f"{case}: {exc}")
    keys = sorted({k for r in per_scan.values() for k in r if k != "notes"})
    aggregate = {}
    for k in keys:
        vals = [r[k] for r in per_scan.values() if r.get(k) is not None]
        aggregate[k] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)), "n": len(vals)} if vals else None
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps({"per_scan": per_scan, "aggregate": aggregate, "errors": errors}, indent=2) + "\n")
    with open(out / "per_scan.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case"] + keys)
        for case, r in per_scan.items():
            w.writerow([case] + ["" if r.get(k) is None else f"{r[k]:.6f}" for k in keys])
    if per_scan:
        iou_bars(per_scan, out / "iou.png")
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    overall = aggregate.get("iou_overall")
    if overall:
        print(f"{len(per_scan)} scans, mean overall IOU {overall['mean']:.4f}")
    return 1 if errors else 0


# probe ----------------------------------------------------------------------


def cmd_probe(args) -> int:
    from .attention import attention_probe
    from .numerics import resize_trilinear
    from .plotting import attention_figure, erf_figure
    from .runet import erf_support

    model, meta = _load(args.checkpoint, torch.float64)
    scan = _read_scan(args.input)
    x, _ = preprocess(scan, int(meta.get("in_plane", 256)))
    net = model.stage1
    half = resize_trilinear(x, factor=0.5)
    grid = tuple(d // 8 for d in half.shape[2:])
    if any(not 0 <= i < g for i, g in zip(args.at, grid)):
        raise CommandError(f"location {args.at} outside the stage-1 bridge grid {grid}")
    out = Path(args.out)
    if args.mode == "erf":
        before, after = erf_support(net, half, args.at)
        vol = np.where(before, 2, np.where(after, 1, 0)).astype(np.uint8)
        center = tuple(min(d - 1, 8 * i + 4) for i, d in zip(args.at, vol.shape))
        erf_figure(before, after, center, out.with_suffix(".png"))
        print(f"ERF voxels before {int(before.sum())}, after {int(after.sum())} of {before.size}")
    else:
        net.eval()
        with torch.no_grad():
            bridge, _ = net.encode(half)
            mu = net.geometry(bridge.shape[2:])
            _, weights = attention_probe(bridge, mu, net.nonlocal_block, args.at)
        vol = weights.numpy()
        attention_figure(vol, args.at, out.with_suffix(".png"))
        print(f"attention over {vol.size} bridge positions, max weight {vol.max():.4f}")
    save_volume(out, Volume(vol, (1.0, 1.0, 1.0)))
    return 0


# complexity -----------------------------------------------------------------


def cmd_complexity(args) -> int:
    from .runet import RUNetConfig, count_macs, count_params, valid_output_dim

    stage = {"1": "I", "2": "II"}[args.stage]
    cfg = RUNetConfig(stage, args.width_scale)
    if stage == "II" and any(valid_output_dim(d) is None for d in args.dims):
        raise CommandError(f"dims {args.dims} do not fit the valid-convolution chain")
    if stage == "I" and any(d % 8 for d in args.dims):
        raise CommandError(f"dims {args.dims} must be divisible by 8 for stage 1")
    macs = count_macs(cfg, args.dims)
    result = {"stage": stage, "width_scale": args.width_scale, "dims": list(args.dims), "params": count_params(cfg), "macs": macs}
    print(json.dumps(result, indent=2))
    return 0


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rtsunet", description="Relational two-stage U-Net for lobe segmentation.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log every training step")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="generate synthetic scans with lobe labels")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=1)
    s.add_argument("--params", help="key=value phantom config")
    s.add_argument("--dims", type=lambda t: _ints(t, what="--dims"), help="D,H,W (overrides --params)")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("train", help="train the cascade end-to-end")
    s.add_argument("--config", help="key=value run config (defaults apply when omitted)")
    s.add_argument("--data", required=True, help="directory with manifest.csv")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--paper-lr", action="store_true", help="use the published learning rate 1e-6")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="segment one scan")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="score predictions against references")
    s.add_argument("--pred", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--out", required=True, help="report directory")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("probe", help="ERF masks or attention weights of the stage-1 bridge")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--mode", choices=("erf", "attention"), required=True)
    s.add_argument("--at", type=lambda t: _ints(t, what="--at"), required=True, help="bridge position i,j,k")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("complexity", help="parameter and MAC counts")
    s.add_argument("--stage", choices=("1", "2"), required=True)
    s.add_argument("--dims", type=lambda t: _ints(t, what="--dims"), required=True)
    s.add_argument("--width-scale", type=float, default=1.0)
    s.set_defaults(func=cmd_complexity)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
