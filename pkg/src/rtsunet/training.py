"""End-to-end cascade training with hard-patch mining."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .cascade import Cascade, k_schedule, ohem_select, tile
from .data import load_labels, load_volume, preprocess, preprocess_labels, resample_nearest
from .losses import border_target, one_hot, total_loss
from .runet import DualHeadOutput, RUNetConfig, RUNet, load_checkpoint, load_state, save_checkpoint

log = logging.getLogger(__name__)

PAPER_LR = 1e-6
LOG_HEADER = ["step", "total", "gld_lobes1", "gld_border1", "gld_lobes2", "gld_border2", "k_fraction"]
DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class RunConfig:
    lr: float = 1e-2
    momentum: float = 0.9
    steps: int = 200
    seed: int = 0
    width_scale: float = 0.25
    mode: str = "initial"
    patches_per_step: int = 2
    in_plane: int = 256
    nonlocal_steps: int = 3
    dtype: str = "float32"

    def validate(self) -> list[str]:
        bad = []
        for name in ("lr", "momentum", "width_scale"):
            if not getattr(self, name) > 0:
                bad.append(f"{name} must be positive")
        for name in ("steps", "patches_per_step", "in_plane", "nonlocal_steps"):
            if getattr(self, name) < 1:
                bad.append(f"{name} must be >= 1")
        if self.seed < 0:
            bad.append("seed must be non-negative")
        if self.mode not in ("initial", "retrain"):
            bad.append(f"mode must be initial or retrain, got {self.mode!r}")
        if self.dtype not in DTYPES:
            bad.append(f"dtype must be one of {sorted(DTYPES)}")
        if self.in_plane % 16:
            bad.append("in_plane must be a multiple of 16")
        return bad

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        """Parse flat ``key = value`` lines, reporting every bad key at once."""
        types = {f.name: f.type for f in fields(cls)}
        kwargs, bad = {}, []
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                bad.append(f"line {lineno}: expected key = value")
                continue
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                bad.append(f"{key}: unknown key")
                continue
            conv = {"float": float, "int": int, "str": str}[types[key]]
            try:
                kwargs[key] = conv(value)
            except ValueError:
                bad.append(f"{key}: cannot parse {value!r} as {types[key]}")
        cfg = cls(**kwargs)
        bad += cfg.validate()
        if bad:
            raise ValueError("invalid run config:\n  " + "\n  ".join(bad))
        return cfg


@dataclass
class Example:
    scan: torch.Tensor  # (1, 1, D, H, W) preprocessed
    labels: np.ndarray  # preprocessed grid
    refs1: dict
    onehot2: torch.Tensor
    border2: torch.Tensor


def make_example(scan_vol, label_vol, in_plane: int, dtype) -> Example:
    x, record = preprocess(scan_vol, in_plane)
    labels = preprocess_labels(label_vol.data, record)
    half = resample_nearest(labels, tuple(d // 2 for d in labels.shape))
    refs1 = {
        "lobes1": one_hot(half, dtype=dtype),
        "border1": torch.as_tensor(border_target(half), dtype=dtype)[None, None],
    }
    return Example(
        x.to(dtype),
        labels,
        refs1,
        one_hot(labels, dtype=dtype),
        torch.as_tensor(border_target(labels), dtype=dtype)[None, None],
    )


def read_manifest(data_dir) -> list[dict]:
    data_dir = Path(data_dir)
    path = data_dir / "manifest.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path}: data manifest not found")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["scan"] = data_dir / row["scan"]
        row["labels"] = data_dir / row["labels"]
    return rows


def load_examples(data_dir, in_plane, dtype) -> list[Example]:
    return [
        make_example(load_volume(r["scan"]), load_labels(r["labels"]), in_plane, dtype) for r in read_manifest(data_dir)
    ]


def cascade_step_loss(model: Cascade, ex: Example, k_fraction: float, n_patches: int, rng, mode="initial"):
    """Forward both stages on one scan and return (loss, terms, patches).

    Stage-2 patches are drawn uniformly from the hard-mined top fraction."""
    out1, up = model.stage1_forward(ex.scan)
    dims = tuple(ex.scan.shape[2:])
    patches = tile(dims)
    hard = ohem_select(up[:, :6].detach(), ex.onehot2, k_fraction, patches)
    pick = rng.choice(len(hard), size=min(n_patches, len(hard)), replace=False)
    chosen = [hard[i] for i in sorted(pick)]
    volume = model.stage2_volume(ex.scan, up)
    outs = [model.patch_forward(volume, p, dims) for p in chosen]
    out2 = DualHeadOutput(torch.cat([o.lobes for o in outs]), torch.cat([o.border for o in outs]))
    window = lambda t, p: t[(slice(None), slice(None)) + p.output_slices()]  # noqa: E731
    refs = dict(ex.refs1)
    refs["lobes2"] = torch.cat([window(ex.onehot2, p) for p in chosen])
    refs["border2"] = torch.cat([window(ex.border2, p) for p in chosen])
    loss, terms = total_loss(out1, out2, refs, mode)
    return loss, terms, chosen


def train(cfg: RunConfig, examples: list[Example], out_dir=None, progress=None) -> tuple[Cascade, list[dict]]:
    """Optimize both stages jointly with SGD; returns the model and loss log."""
    bad = cfg.validate()
    if bad:
        raise ValueError("invalid run config: " + "; ".join(bad))
    if not examples:
        raise ValueError("no training examples")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    dtype = DTYPES[cfg.dtype]
    model = Cascade.create(cfg.width_scale, cfg.seed, dtype, cfg.nonlocal_steps)
    if dtype == torch.float32:
        model.stage2.to(memory_format=torch.channels_last_3d)
    model.train()
    opt = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
    rows = []
    order = []
    t0 = time.time()
    for step in range(cfg.steps):
        if not order:
            order = list(rng.permutation(len(examples)))
        ex = examples[order.pop()]
        k = k_schedule(step, cfg.steps - 1)
        opt.zero_grad(set_to_none=True)
        loss, terms, _ = cascade_step_loss(model, ex, k, cfg.patches_per_step, rng, cfg.mode)
        loss.backward()
        opt.step()
        row = {"step": step, "total": loss.item(), "k_fraction": k}
        row.update({name: v.item() for name, v in terms.items() if name in LOG_HEADER})
        rows.append(row)
        if progress is not None:
            progress(row)
        log.info("step %d loss %.4f k %.3f (%.1fs)", step, row["total"], k, time.time() - t0)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_model(out_dir / "model.rtsu", model, cfg)
        write_loss_log(out_dir / "loss_log.csv", rows)
    return model, rows


def write_loss_log(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_HEADER, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def save_model(path, model: Cascade, cfg: RunConfig) -> None:
    tensors = {
        "config.width_scale": np.float64(cfg.width_scale),
        "config.nonlocal_steps": np.float64(cfg.nonlocal_steps),
        "config.in_plane": np.float64(cfg.in_plane),
        "config.seed": np.float64(cfg.seed),
    }
    for prefix, net in (("stage1.", model.stage1), ("stage2.", model.stage2)):
        for k, v in net.state_dict().items():
            tensors[prefix + k] = v
    save_checkpoint(path, tensors)


def load_model(path, dtype=torch.float64) -> tuple[Cascade, dict]:
    arrays = load_checkpoint(path)
    try:
        meta = {k.split(".", 1)[1]: float(np.asarray(arrays[k]).reshape(-1)[0]) for k in arrays if k.startswith("config.")}
        width, nl_steps = meta["width_scale"], int(meta["nonlocal_steps"])
    except KeyError as exc:
        raise ValueError(f"{path}: checkpoint lacks config record {exc}") from None
    s1 = RUNet(RUNetConfig("I", width, steps=nl_steps, dtype=dtype))
    s2 = RUNet(RUNetConfig("II", width, steps=nl_steps, dtype=dtype))
    load_state(s1, arrays, "stage1.")
    load_state(s2, arrays, "stage2.")
    model = Cascade(s1, s2)
    model.eval()
    return model, meta


def smoothed(values, window: int = 50) -> np.ndarray:
    """Means of consecutive non-overlapping ``window``-step blocks."""
    values = np.asarray(values, dtype=float)
    n = len(values) // window
    return values[: n * window].reshape(n, window).mean(1)
