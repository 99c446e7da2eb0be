"""Evaluation and benchmarking: PCK, latency/FPS, accounting, and sweeps.

PCK@alpha counts a keypoint as correct when its prediction lies within
``alpha`` times a normalization length of the ground truth (Euclidean,
pixel-wise, boundary inclusive). The normalization length is selectable:
the ground-truth skeleton bounding-box diagonal (default), the length of a
reference link, or an absolute pixel value.

Latency is wall-clock seconds per forward pass, measured single-threaded
after a warmup; post-processing is timed separately so FPS can be reported
both for inference alone and for the full pipeline.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import compressor, network, postprocess, trainer
from .dataset_synth import KeypointSet
from .errors import ContractViolation, UndefinedMetricError
from .network import ModelSpec, ModelWeights
from .tensor_core import Workspace

__all__ = [
    "PckConfig",
    "LatencyStats",
    "SweepRow",
    "SweepReport",
    "SweepConfig",
    "pck",
    "evaluate_pck",
    "benchmark_inference",
    "account",
    "sweep",
    "write_report_csv",
    "write_report_svg",
]

CSV_HEADER = ("rate,pck_mean,pck_std,infer_ms_mean,infer_ms_std,"
              "fps_infer,fps_total,params,flops,size_bytes")


@dataclass(frozen=True)
class PckConfig:
    """PCK threshold rule: distance <= alpha * normalization length.

    normalization:
      - "bbox-diagonal": diagonal of the bounding box of the visible
        ground-truth keypoints (per image); ``reference`` unused.
      - "reference-link": distance between ground-truth keypoints
        ``reference`` and ``reference + 1``.
      - "absolute-pixels": ``reference`` is the length itself.
    """

    alpha: float = 0.5
    normalization: str = "bbox-diagonal"
    reference: float | int | None = None

    def __post_init__(self):
        if self.alpha <= 0:
            raise ContractViolation("alpha must be positive")
        if self.normalization not in ("bbox-diagonal", "reference-link",
                                      "absolute-pixels"):
            raise ContractViolation(
                f"unknown normalization {self.normalization!r}")
        if self.normalization == "reference-link":
            ref = 0 if self.reference is None else int(self.reference)
            if not 0 <= ref < 7:
                raise ContractViolation("reference link index must be in [0, 7)")
        if self.normalization == "absolute-pixels" and (
                self.reference is None or self.reference <= 0):
            raise ContractViolation(
                "absolute-pixels normalization needs a positive reference")


def _norm_length(truth: KeypointSet, config: PckConfig) -> float:
    if config.normalization == "absolute-pixels":
        return float(config.reference)
    if config.normalization == "reference-link":
        ref = 0 if config.reference is None else int(config.reference)
        a, b = truth.xy[ref], truth.xy[ref + 1]
        return float(np.hypot(*(a - b)))
    vis = truth.xy[truth.visible]
    if len(vis) == 0:
        raise UndefinedMetricError("no visible keypoints to normalize against")
    span = vis.max(axis=0) - vis.min(axis=0)
    return float(np.hypot(span[0], span[1]))


def _as_prediction_list(predicted):
    """Accept a KeypointSet or a sequence of (x, y) | None."""
    if isinstance(predicted, KeypointSet):
        return [tuple(xy) if v else None
                for xy, v in zip(predicted.xy, predicted.visible)]
    return list(predicted)


def pck(predicted, truth: KeypointSet, config: PckConfig) -> float:
    """Fraction of evaluable keypoints predicted within the threshold.

    Keypoints invisible in the ground truth are excluded from the
    denominator; undetected predictions count as incorrect. Raises
    UndefinedMetricError when nothing is evaluable.
    """
    preds = _as_prediction_list(predicted)
    if len(preds) != len(truth.xy):
        raise ContractViolation(
            f"{len(preds)} predictions for {len(truth.xy)} keypoints")
    limit = config.alpha * _norm_length(truth, config)
    total = 0
    correct = 0
    for p, t, v in zip(preds, truth.xy, truth.visible):
        if not v:
            continue
        total += 1
        if p is None:
            continue
        if np.hypot(p[0] - t[0], p[1] - t[1]) <= limit:
            correct += 1
    if total == 0:
        raise UndefinedMetricError("all ground-truth keypoints are invisible")
    return correct / total


def evaluate_pck(spec: ModelSpec, weights: ModelWeights, samples,
                 config: PckConfig | None = None,
                 threshold: float = postprocess.DEFAULT_THRESHOLD,
                 m: float = postprocess.DEFAULT_M,
                 workspace: Workspace | None = None):
    """Run the full predict-and-score pipeline over a sample list.

    Returns (mean, std, per-sample scores); std is the population standard
    deviation.
    """
    if config is None:
        config = PckConfig()
    ws = workspace if workspace is not None else Workspace()
    scores = []
    for sample in samples:
        out = network.forward(spec, weights, sample.image, workspace=ws)
        preds, _ = postprocess.extract_keypoints(out, threshold, m)
        scores.append(pck(preds, sample.keypoints, config))
    arr = np.asarray(scores)
    return float(arr.mean()), float(arr.std()), scores


@dataclass
class LatencyStats:
    """Wall-clock timing of repeated single-image forward passes."""

    infer_seconds: np.ndarray   # per measured rep
    post_seconds: np.ndarray    # matching post-processing times

    @property
    def mean(self) -> float:
        return float(self.infer_seconds.mean())

    @property
    def std(self) -> float:
        return float(self.infer_seconds.std())

    @property
    def fps(self) -> float:
        return 1.0 / self.mean

    @property
    def post_mean(self) -> float:
        return float(self.post_seconds.mean())

    @property
    def fps_total(self) -> float:
        return 1.0 / (self.mean + self.post_mean)


def benchmark_inference(spec: ModelSpec, weights: ModelWeights, images,
                        warmup: int = 5, reps: int = 50,
                        threshold: float = postprocess.DEFAULT_THRESHOLD,
                        m: float = postprocess.DEFAULT_M) -> LatencyStats:
    """Time ``reps`` single-image forward passes, single-threaded.

    ``images`` are cycled through; ``warmup`` unmeasured passes run first.
    Post-processing (keypoint extraction) is timed separately per rep.
    """
    if reps < 1:
        raise ContractViolation("reps must be >= 1")
    imgs = [np.ascontiguousarray(np.asarray(im, dtype=np.float32))
            for im in images]
    if not imgs:
        raise ContractViolation("need at least one image")
    ws = Workspace()
    infer_t = np.empty(reps)
    post_t = np.empty(reps)
    with threadpool_limits(limits=1):
        for i in range(warmup):
            out = network.forward(spec, weights, imgs[i % len(imgs)], workspace=ws)
            postprocess.extract_keypoints(out, threshold, m)
        for i in range(reps):
            img = imgs[i % len(imgs)]
            t0 = time.perf_counter()
            out = network.forward(spec, weights, img, workspace=ws)
            t1 = time.perf_counter()
            postprocess.extract_keypoints(out, threshold, m)
            t2 = time.perf_counter()
            infer_t[i] = t1 - t0
            post_t[i] = t2 - t1
    return LatencyStats(infer_t, post_t)


def account(model_path, input_h: int = 224, input_w: int = 224):
    """(params, flops, size_bytes) for a model file.

    FLOPs are for one forward pass at ``input_h`` x ``input_w``; size is the
    exact on-disk byte count.
    """
    spec, _ = network.load_model(model_path)
    params = network.count_params(spec)
    flops = network.count_flops(spec, input_h, input_w)
    size = Path(model_path).stat().st_size
    return params, flops, size


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    rate: float
    pck_mean: float
    pck_std: float
    infer_ms_mean: float
    infer_ms_std: float
    fps_infer: float
    fps_total: float
    params: int
    flops: int
    size_bytes: int


@dataclass
class SweepReport:
    rows: list = field(default_factory=list)

    def row_for(self, rate: float) -> SweepRow:
        for row in self.rows:
            if abs(row.rate - rate) < 1e-9:
                return row
        raise KeyError(f"no row for rate {rate}")


@dataclass(frozen=True)
class SweepConfig:
    """Everything a reproduction sweep needs besides the data."""

    train: trainer.TrainConfig = trainer.TrainConfig()
    retrain: trainer.TrainConfig = trainer.TrainConfig(
        max_epochs=trainer.RETRAIN_EPOCHS)
    pck: PckConfig = PckConfig()
    threshold: float = postprocess.DEFAULT_THRESHOLD
    m: float = postprocess.DEFAULT_M
    warmup: int = 5
    reps: int = 50
    quantize: bool = True
    seed: int = 0
    bench_images: int = 4


def sweep(train_set, val_set, rates, config: SweepConfig, out_dir,
          baseline=None, log=None):
    """Prune -> retrain -> (optionally) quantize -> evaluate, per rate.

    Trains the rate-0 baseline first (or reuses ``baseline`` as the trained
    (spec, weights) pair), then derives each pruned model from it. Writes
    one model file per rate plus ``sweep.csv`` and ``sweep.svg`` into
    ``out_dir``; returns the SweepReport. A rate-0 row is always included.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    say = log if log is not None else (lambda msg: None)
    rates = sorted({0.0} | {float(r) for r in rates})
    if any(not 0.0 <= r < 1.0 for r in rates):
        raise ContractViolation("sweep rates must lie in [0, 1)")

    if baseline is None:
        say("training baseline model")
        spec0, w0 = network.build_fcn_pose(config.seed)
        w0, _ = trainer.train(spec0, w0, train_set, val_set, config.train)
    else:
        spec0, w0 = baseline

    sample_h = train_set[0].height
    sample_w = train_set[0].width
    bench_imgs = [s.image for s in val_set[:config.bench_images]]
    report = SweepReport()
    for rate in rates:
        tag = f"rate{int(round(rate * 100)):02d}"
        try:
            if rate == 0.0:
                spec_r, w_r = spec0, w0
            else:
                say(f"pruning at rate {rate:.2f} and retraining")
                plan = compressor.plan_prune(w0, rate)
                spec_r, w_r = compressor.apply_prune(spec0, w0, plan)
                w_r, _ = trainer.retrain_after_prune(
                    spec_r, w_r, train_set, val_set, config.retrain)
                plan.save(out_dir / f"{tag}_plan.json")
            if config.quantize:
                w_r = compressor.quantize_model(spec_r, w_r)
            model_path = out_dir / f"{tag}.fcnp"
            network.save_model(spec_r, w_r, model_path)
            say(f"evaluating {tag}")
            mean, std, _ = evaluate_pck(
                spec_r, w_r, val_set, config.pck, config.threshold, config.m)
            stats = benchmark_inference(
                spec_r, w_r, bench_imgs, config.warmup, config.reps,
                config.threshold, config.m)
            params, flops, size = account(model_path, sample_h, sample_w)
            report.rows.append(SweepRow(
                rate=rate,
                pck_mean=mean,
                pck_std=std,
                infer_ms_mean=stats.mean * 1e3,
                infer_ms_std=stats.std * 1e3,
                fps_infer=stats.fps,
                fps_total=stats.fps_total,
                params=params,
                flops=flops,
                size_bytes=size,
            ))
        except Exception as exc:
            exc.args = (f"sweep failed at rate {rate}: {exc}",)
            raise
    write_report_csv(report, out_dir / "sweep.csv")
    write_report_svg(report, out_dir / "sweep.svg")
    return report


def write_report_csv(report: SweepReport, path):
    lines = [CSV_HEADER]
    for r in report.rows:
        lines.append(
            f"{r.rate:.2f},{r.pck_mean:.6f},{r.pck_std:.6f},"
            f"{r.infer_ms_mean:.4f},{r.infer_ms_std:.4f},"
            f"{r.fps_infer:.4f},{r.fps_total:.4f},"
            f"{r.params},{r.flops},{r.size_bytes}"
        )
    with open(path, "w", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def write_report_svg(report: SweepReport, path, width=640, height=420):
    """Efficiency curve: PCK and max-normalized FPS against pruning rate."""
    rows = sorted(report.rows, key=lambda r: r.rate)
    rates = [r.rate for r in rows]
    pcks = [r.pck_mean for r in rows]
    fps_max = max(r.fps_infer for r in rows) or 1.0
    fps_norm = [r.fps_infer / fps_max for r in rows]

    ml, mr, mt, mb = 60, 20, 30, 50
    pw, ph = width - ml - mr, height - mt - mb
    x_lo, x_hi = 0.0, max(max(rates), 0.9)

    def px(rate):
        return ml + pw * (rate - x_lo) / (x_hi - x_lo)

    def py(v):
        return mt + ph * (1.0 - v)

    def polyline(vals, color):
        pts = " ".join(f"{px(r):.1f},{py(v):.1f}" for r, v in zip(rates, vals))
        return (f'<polyline points="{pts}" fill="none" stroke="{color}" '
                f'stroke-width="2"/>' +
                "".join(f'<circle cx="{px(r):.1f}" cy="{py(v):.1f}" r="3" '
                        f'fill="{color}"/>' for r, v in zip(rates, vals)))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" '
        'stroke="#888"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = py(frac)
        parts.append(f'<line x1="{ml}" y1="{y:.1f}" x2="{ml + pw}" '
                     f'y2="{y:.1f}" stroke="#ddd"/>')
        parts.append(f'<text x="{ml - 8}" y="{y + 4:.1f}" font-size="11" '
                     f'text-anchor="end">{frac:.2f}</text>')
    for r in rates:
        parts.append(f'<text x="{px(r):.1f}" y="{mt + ph + 16}" '
                     f'font-size="11" text-anchor="middle">{r:.1f}</text>')
    parts.append(polyline(pcks, "#1f77b4"))
    parts.append(polyline(fps_norm, "#d62728"))
    parts.append(f'<text x="{ml}" y="{mt - 10}" font-size="12" '
                 'fill="#1f77b4">PCK</text>')
    parts.append(f'<text x="{ml + 60}" y="{mt - 10}" font-size="12" '
                 'fill="#d62728">FPS (normalized)</text>')
    parts.append(f'<text x="{ml + pw / 2:.0f}" y="{height - 12}" '
                 'font-size="12" text-anchor="middle">pruning rate</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
