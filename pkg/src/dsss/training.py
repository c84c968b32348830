"""Optimization, evaluation and the ablation harness."""

from __future__ import annotations

import csv
import io
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from . import netpbm
from . import tensor as T
from .config import GROUPS, ExperimentConfig
from .model import (
    PARAM_GROUPS,
    AugmentStreams,
    ConfigurationError,
    ModelParams,
    forward,
    init_params,
    predict,
)
from .objectives import ConfusionMatrix, miou
from .rng import stream
from .sensitivity import IGNORE, quantize_map
from .synth import Dataset, Sample


class DivergenceError(RuntimeError):
    """Loss became non-finite; ``dump`` holds the offending batch."""

    def __init__(self, step: int, dump: dict):
        super().__init__(f"loss diverged at step {step}")
        self.step = step
        self.dump = dump


def poly_lr(base_lr: float, step: int, total: int, power: float = 0.9) -> float:
    if total <= 0:
        return base_lr
    return base_lr * max(1.0 - step / total, 0.0) ** power


class SGD:
    """SGD with heavy-ball momentum: ``v = m*v + g``; ``p -= lr*v``."""

    def __init__(self, params: ModelParams, momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(t.data) for k, t in params.tensors.items()}

    def step(self, grads: dict[T.Tensor, np.ndarray], lr: float) -> None:
        for name, p in self.params.tensors.items():
            g = grads.get(p)
            v = self.velocity[name]
            v *= self.momentum
            if g is not None:
                v += g
            if lr != 0.0:
                p.data -= lr * v


def batch_order(n: int, batch: int, steps: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Index batches from successive random permutations of the dataset."""
    out: list[np.ndarray] = []
    pool: list[int] = []
    for _ in range(steps):
        while len(pool) < batch:
            pool.extend(rng.permutation(n).tolist())
        out.append(np.array(pool[:batch]))
        pool = pool[batch:]
    return out


@dataclass
class TrainResult:
    params: ModelParams
    trail: list[dict] = field(default_factory=list)


def train(
    cfg: ExperimentConfig,
    dataset: Dataset,
    on_record: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train from the config's root seed; deterministic for fixed inputs."""
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    seed = cfg.seed
    params = init_params(cfg, seed)
    aug = AugmentStreams.from_seed(seed)
    batches = batch_order(len(dataset), cfg.batch, cfg.iterations, stream(seed, "shuffle"))
    opt = SGD(params, cfg.momentum)
    trail: list[dict] = []
    with threadpool_limits(1):
        for step, idx in enumerate(batches):
            lr = poly_lr(cfg.lr, step, cfg.iterations, cfg.poly_power)
            res = forward(params, dataset.rgb[idx], dataset.depth[idx], dataset.labels[idx], cfg, aug)
            rep = res.report
            if not math.isfinite(rep.total):
                raise DivergenceError(
                    step,
                    {
                        "step": step,
                        "ids": [dataset.ids[i] for i in idx],
                        "ce": rep.ce,
                        "sa": rep.sa,
                        "rgb": dataset.rgb[idx],
                        "depth": dataset.depth[idx],
                        "labels": dataset.labels[idx],
                    },
                )
            grads = T.backward(res.loss)
            opt.step(grads, lr)
            if step % cfg.log_every == 0 or step == cfg.iterations - 1:
                rec = {"step": step, "lr": lr, "ce": rep.ce, "sa": rep.sa, "loss": rep.total}
                trail.append(rec)
                if on_record is not None:
                    on_record(rec)
    return TrainResult(params, trail)


def evaluate(params: ModelParams, dataset: Dataset, cfg: ExperimentConfig) -> dict:
    """Confusion matrix and mIoU over a split, without stylization or losses."""
    if len(dataset) == 0:
        raise ValueError("evaluation dataset is empty")
    cm = ConfusionMatrix(cfg.K)
    with threadpool_limits(1):
        for start in range(0, len(dataset), cfg.eval_batch):
            sl = slice(start, start + cfg.eval_batch)
            pred = predict(params, dataset.rgb[sl], dataset.depth[sl], cfg)
            cm.update(pred, dataset.labels[sl])
    mean, per_class = miou(cm)
    return {"domain": dataset.domain, "miou": mean, "per_class": per_class, "confusion": cm}


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = "DSSS-CHECKPOINT 1"


def encode_checkpoint(params: ModelParams, cfg: ExperimentConfig) -> bytes:
    """Text header (shapes, config hash) then a length-prefixed little-endian float64 blob."""
    lines = [CHECKPOINT_MAGIC, f"config_hash {cfg.hash()}", f"tensors {len(params.tensors)}"]
    for name, t in params.tensors.items():
        lines.append(f"{name} {'x'.join(str(s) for s in t.shape)}")
    header = ("\n".join(lines) + "\nend\n").encode("ascii")
    blob = params.to_bytes()
    return header + struct.pack("<Q", len(blob) // 8) + blob


def decode_checkpoint(buf: bytes) -> tuple[ModelParams, str]:
    marker = b"\nend\n"
    cut = buf.find(marker)
    if not buf.startswith(CHECKPOINT_MAGIC.encode()) or cut < 0:
        raise ValueError("not a DSSS checkpoint")
    lines = buf[:cut].decode("ascii").split("\n")
    config_hash = lines[1].split(" ", 1)[1]
    n = int(lines[2].split(" ", 1)[1])
    specs = []
    for line in lines[3 : 3 + n]:
        name, dims = line.rsplit(" ", 1)
        specs.append((name, tuple(int(d) for d in dims.split("x"))))
    off = cut + len(marker)
    (count,) = struct.unpack_from("<Q", buf, off)
    values = np.frombuffer(buf, dtype="<f8", count=count, offset=off + 8)
    if sum(int(np.prod(s)) for _, s in specs) != count:
        raise ValueError("checkpoint header and payload disagree")
    tensors, pos = {}, 0
    for name, shape in specs:
        size = int(np.prod(shape))
        tensors[name] = T.Tensor(values[pos : pos + size].reshape(shape).copy(), requires_grad=True, name=name)
        pos += size
    return ModelParams(tensors), config_hash


def write_checkpoint(path: str | Path, params: ModelParams, cfg: ExperimentConfig) -> None:
    Path(path).write_bytes(encode_checkpoint(params, cfg))


def read_checkpoint(path: str | Path) -> tuple[ModelParams, str]:
    return decode_checkpoint(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# ablation


@dataclass
class CellResult:
    group: str
    seed: int
    miou: dict[str, float]
    param_digest: str
    checkpoint: bytes = b""


@dataclass
class AblationTable:
    groups: list[str]
    domains: list[str]
    seeds: list[int]
    cells: list[CellResult]

    def values(self, group: str, domain: str) -> np.ndarray:
        return np.array([c.miou[domain] for c in self.cells if c.group == group])

    def mean_column(self, group: str) -> np.ndarray:
        """Per-seed average over target domains."""
        per_seed = [np.mean([c.miou[d] for d in self.domains]) for c in self.cells if c.group == group]
        return np.array(per_seed)

    def summary(self, group: str, domain: str | None = None) -> tuple[float, float]:
        vals = self.mean_column(group) if domain is None else self.values(group, domain)
        sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        return float(np.mean(vals)), sd

    def to_csv(self) -> str:
        """Groups x (domains + Mean), mIoU in points, ``mean`` and ``sd`` over seeds."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        header = ["group"]
        for d in self.domains + ["Mean"]:
            header += [f"{d}_mean", f"{d}_sd"]
        writer.writerow(header)
        for g in self.groups:
            row = [g]
            for d in self.domains + [None]:
                m, s = self.summary(g, d)
                row += [f"{100 * m:.4f}", f"{100 * s:.4f}"]
            writer.writerow(row)
        return buf.getvalue()


_SHARED: dict = {}


def run_cell(base: ExperimentConfig, group: str, seed: int, source: Dataset, targets: list[Dataset]) -> CellResult:
    cfg = base.replace(group=group, seed=seed)
    result = train(cfg, source)
    scores = {t.domain: evaluate(result.params, t, cfg)["miou"] for t in targets}
    return CellResult(group, seed, scores, result.params.digest(), encode_checkpoint(result.params, cfg))


def _run_cell_shared(args: tuple[str, int]) -> CellResult:
    group, seed = args
    return run_cell(_SHARED["cfg"], group, seed, _SHARED["source"], _SHARED["targets"])


def worker_count(cells: int) -> int:
    cap = os.environ.get("DSSS_THREADS")
    n = os.cpu_count() or 1
    if cap:
        n = min(n, max(int(cap), 1))
    return max(1, min(n, cells))


def ablate(
    cfg: ExperimentConfig,
    source: Dataset,
    targets: list[Dataset],
    groups: list[str] | None = None,
    seeds: list[int] | None = None,
    workers: int | None = None,
    on_cell: Callable[[CellResult], None] | None = None,
) -> AblationTable:
    """Train every (group, seed) cell on ``source`` and score it on each target."""
    groups = list(groups if groups is not None else cfg.groups)
    seeds = list(seeds if seeds is not None else cfg.seeds)
    if len(groups) < 1 or len(seeds) < 1 or not targets:
        raise ConfigurationError("ablation needs groups, seeds and at least one target")
    for g in groups:
        if g not in GROUPS:
            raise ConfigurationError(f"unknown group {g!r}")
    jobs = [(g, s) for g in groups for s in seeds]
    n = workers if workers is not None else worker_count(len(jobs))
    if n <= 1:
        cells = []
        for g, s in jobs:
            cell = run_cell(cfg, g, s, source, targets)
            if on_cell:
                on_cell(cell)
            cells.append(cell)
    else:
        import multiprocessing as mp

        _SHARED.update(cfg=cfg, source=source, targets=targets)
        ctx = mp.get_context("fork")
        with ctx.Pool(n) as pool:
            cells = pool.map(_run_cell_shared, jobs, chunksize=1)
        if on_cell:
            for cell in cells:
                on_cell(cell)
    return AblationTable(groups, [t.domain for t in targets], seeds, cells)


# ---------------------------------------------------------------------------
# inspection export

LABEL_PALETTE = np.array(
    [
        (128, 64, 128), (244, 35, 232), (70, 70, 70), (102, 102, 156), (190, 153, 153),
        (153, 153, 153), (250, 170, 30), (220, 220, 0), (107, 142, 35), (152, 251, 152),
        (70, 130, 180), (220, 20, 60), (255, 0, 0), (0, 0, 142), (0, 0, 70),
        (0, 60, 100), (0, 80, 100), (0, 0, 230), (119, 11, 32),
    ],
    dtype=np.uint8,
)
IGNORE_COLOR = np.array((0, 0, 0), dtype=np.uint8)


def labels_to_rgb(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.empty(labels.shape + (3,), dtype=np.uint8)
    out[:] = IGNORE_COLOR
    valid = labels != IGNORE
    out[valid] = LABEL_PALETTE[labels[valid]]
    return out


def rgb_to_labels(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb)
    out = np.full(rgb.shape[:2], 254, dtype=np.int64)
    for k, colour in enumerate(LABEL_PALETTE):
        out[np.all(rgb == colour, axis=-1)] = k
    out[np.all(rgb == IGNORE_COLOR, axis=-1)] = IGNORE
    if np.any(out == 254):
        raise ValueError("pixmap contains colours outside the label palette")
    return out.astype(np.uint8)


def export_sensitivity(
    params: ModelParams,
    sample: Sample,
    directory: str | Path,
    cfg: ExperimentConfig,
    seed: int = 0,
) -> list[Path]:
    """Write S_g and N_g graymaps and the predicted label pixmap for one sample.

    The sensitivity view uses a training-style perturbation drawn from a fixed
    ``export`` stream, so repeated exports are identical.
    """
    if cfg.components.suppression != "csss":
        raise ConfigurationError(f"group {cfg.group} does not use class-wise soft suppression")
    directory = Path(directory)
    rgb, depth, labels = sample.rgb[None], sample.depth[None], sample.labels[None]
    with T.no_grad(), threadpool_limits(1):
        res = forward(params, rgb, depth, labels, cfg, AugmentStreams.from_seed(stream(seed, "export").integers(2**62)))
        pred = predict(params, rgb, depth, cfg)[0]
    paths = [directory / "s_g.pgm", directory / "n_g.pgm", directory / "pred.ppm"]
    try:
        directory.mkdir(parents=True, exist_ok=True)
        netpbm.write_pgm(paths[0], quantize_map(res.bundle.global_map.data[0, 0]))
        netpbm.write_pgm(paths[1], quantize_map(res.bundle.non_sensitive.data[0, 0]))
        netpbm.write_ppm(paths[2], labels_to_rgb(pred))
    except OSError as exc:
        raise OSError(f"export to {directory} failed: {exc}") from exc
    return paths


def parameter_groups() -> tuple[str, ...]:
    return PARAM_GROUPS
