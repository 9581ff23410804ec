"""Linear latency model and parametric device simulators.

The simulators stand in for on-device benchmarking at desk scale: each one
prices multiply-adds per operation class (ms per mega-MAdd) plus a per-layer
dispatch overhead, optionally perturbed by multiplicative Gaussian noise.

The latency model is a ridge regression over sparse layer-bucket counts,
matching the simulators' structure exactly, so a noiseless fit is exact on
collision-free layouts and a 1%-noise fit stays above r^2 = 0.99.

Caveat for large layouts: a bucket key (atom, c_in, c_out) can recur at
positions with different spatial resolutions (the deep default layout repeats
block widths), which caps the fidelity of a count-based linear model there;
``channel_bands=True`` trades per-bucket precision for sample efficiency when
records are scarce relative to the bucket count.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .arch import NetworkSpec, load_file, save_file
from .analysis import OP_CLASSES, net_feature_counts, network_units, space_buckets
from .space import SpaceSpec, random_sample, decode


class FitError(RuntimeError):
    """Latency model could not be fitted."""


class UnknownBucketError(ValueError):
    """Prediction requested for a feature bucket the model has never seen."""

    def __init__(self, bucket: str):
        super().__init__(f"unknown feature bucket: {bucket}")
        self.bucket = bucket


@dataclass(frozen=True)
class DeviceSimulator:
    """Per-op-class cost rates (ms per mega-MAdd) plus per-layer overhead."""

    name: str
    regular_conv: float
    depthwise_conv: float
    pointwise_conv: float
    se_block: float
    overhead_ms: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        for cls in OP_CLASSES:
            if getattr(self, cls) < 0:
                raise ValueError(f"{self.name}: rate for {cls} must be >= 0")
        if self.overhead_ms < 0 or self.noise_sigma < 0:
            raise ValueError(f"{self.name}: overhead and noise_sigma must be >= 0")

    def rate(self, op_class: str) -> float:
        if op_class not in OP_CLASSES:
            raise ValueError(f"unknown op class {op_class!r}")
        return getattr(self, op_class)


# Built-in profiles. The accelerator profile charges depthwise multiply-adds
# 21x the regular-conv rate, so a regular conv carrying 7x the MAdds of its
# depthwise counterpart runs exactly 3x faster; squeeze-excite is priced
# steeply as a poorly supported op. The DSP profile shares the accelerator
# rates and is meant to pair with the kernel-5-free (dsp) space adaptation.
BUILTIN_DEVICES = {
    "cpu_sim": DeviceSimulator("cpu_sim", 1.0, 1.0, 1.0, 1.0),
    "accel_sim": DeviceSimulator("accel_sim", 1.0, 21.0, 1.0, 50.0),
    "dsp_sim": DeviceSimulator("dsp_sim", 1.0, 21.0, 1.0, 50.0),
}


def simulate_groups(
    device: DeviceSimulator,
    groups: tuple[tuple[tuple[str, int], ...], ...],
    rng: np.random.Generator | None = None,
) -> float:
    """Price conv units grouped per layer; overhead is charged per group.

    With ``rng`` given and ``noise_sigma > 0`` the total is scaled by
    ``1 + eps``, ``eps ~ Normal(0, noise_sigma)``; ``rng=None`` is exact.
    """
    total = device.overhead_ms * len(groups)
    for group in groups:
        for op_class, madds in group:
            total += device.rate(op_class) * madds / 1e6
    if rng is not None and device.noise_sigma > 0:
        total *= 1.0 + rng.normal(0.0, device.noise_sigma)
    return total


def simulate_latency(
    device: DeviceSimulator, net: NetworkSpec, rng: np.random.Generator | None = None
) -> float:
    """Simulated latency of a whole network (stem included), in ms."""
    return simulate_groups(device, network_units(net), rng)


@dataclass(frozen=True)
class BenchmarkRecord:
    """One (architecture, measured latency) observation."""

    net: NetworkSpec
    latency_ms: float

    def __post_init__(self):
        if self.latency_ms <= 0:
            raise ValueError(f"latency must be positive, got {self.latency_ms}")


def generate_benchmarks(
    space: SpaceSpec, device: DeviceSimulator, n: int, rng: np.random.Generator
) -> list[BenchmarkRecord]:
    """Benchmark ``n`` uniformly sampled architectures on a simulated device."""
    if n < 1:
        raise ValueError(f"need at least one benchmark, got n={n}")
    records = []
    for _ in range(n):
        net = decode(space, random_sample(space, rng))
        records.append(BenchmarkRecord(net, simulate_latency(device, net, rng)))
    return records


@dataclass(eq=False)
class LatencyModel:
    """Linear model over layer buckets: latency = counts . weights + intercept.

    The bucket index covers every bucket the space can produce, so prediction
    is total on in-space architectures; buckets unseen at fit time simply
    carry near-zero ridge-shrunk weights. Negative predictions are possible
    (the model is linear and unconstrained).
    """

    buckets: tuple[str, ...]
    weights: np.ndarray
    intercept: float
    ridge_lambda: float
    train_r2: float
    holdout_r2: float | None = None
    channel_bands: bool = False
    space_ref: str = ""
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        self._index = {b: i for i, b in enumerate(self.buckets)}


def _feature_matrix(
    records: list[BenchmarkRecord], buckets: tuple[str, ...], channel_bands: bool
) -> tuple[np.ndarray, np.ndarray]:
    index = {b: i for i, b in enumerate(buckets)}
    x = np.zeros((len(records), len(buckets)), dtype=np.float64)
    y = np.empty(len(records), dtype=np.float64)
    for row, record in enumerate(records):
        for bucket, count in net_feature_counts(record.net, channel_bands).items():
            col = index.get(bucket)
            if col is None:
                raise UnknownBucketError(bucket)
            x[row, col] = count
        y[row] = record.latency_ms
    return x, y


def fit(
    records: list[BenchmarkRecord],
    space: SpaceSpec,
    ridge_lambda: float = 1e-6,
    channel_bands: bool = False,
    space_ref: str = "",
) -> LatencyModel:
    """Ridge least squares by normal equations; deterministic.

    Minimizes ``sum (prediction - measured)^2 + lambda * |weights|^2`` with
    an unpenalized intercept. Raises :class:`FitError` on a singular system,
    advising ``ridge_lambda > 0`` when it was zero.
    """
    if len(records) < 2:
        raise FitError(f"need at least 2 benchmark records, got {len(records)}")
    if ridge_lambda < 0:
        raise FitError(f"ridge_lambda must be >= 0, got {ridge_lambda}")
    buckets = space_buckets(space, channel_bands)
    x, y = _feature_matrix(records, buckets, channel_bands)
    d = len(buckets)
    xa = np.hstack([x, np.ones((len(records), 1))])
    normal = xa.T @ xa
    normal[:d, :d] += ridge_lambda * np.eye(d)
    try:
        beta = np.linalg.solve(normal, xa.T @ y)
    except np.linalg.LinAlgError as exc:
        hint = "; use ridge_lambda > 0" if ridge_lambda == 0 else ""
        raise FitError(f"normal equations are singular{hint}") from exc
    model = LatencyModel(
        buckets=buckets,
        weights=beta[:d],
        intercept=float(beta[d]),
        ridge_lambda=ridge_lambda,
        train_r2=0.0,
        channel_bands=channel_bands,
        space_ref=space_ref,
    )
    model.train_r2 = r2(model, records)
    return model


def predict(model: LatencyModel, net: NetworkSpec) -> float:
    """Predicted latency in ms; unknown buckets raise, naming the bucket."""
    total = model.intercept
    for bucket, count in net_feature_counts(net, model.channel_bands).items():
        col = model._index.get(bucket)
        if col is None:
            raise UnknownBucketError(bucket)
        total += model.weights[col] * count
    return float(total)


def r2(model: LatencyModel, records: list[BenchmarkRecord]) -> float:
    """Coefficient of determination, 1 - SSres/SStot.

    Degenerate convention for constant targets (SStot = 0): 1.0 when the
    residuals are exactly zero too, else 0.0.
    """
    y = np.array([r.latency_ms for r in records], dtype=np.float64)
    preds = np.array([predict(model, r.net) for r in records], dtype=np.float64)
    ss_res = float(np.sum((y - preds) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else 0.0
    return 1.0 - ss_res / ss_tot


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def save_model(model: LatencyModel, path: str | Path, meta: dict | None = None) -> None:
    doc = {
        "space_ref": model.space_ref,
        "channel_bands": model.channel_bands,
        "buckets": list(model.buckets),
        "weights": [float(w) for w in model.weights],
        "intercept": model.intercept,
        "lambda": model.ridge_lambda,
        "train_r2": model.train_r2,
        "holdout_r2": model.holdout_r2,
    }
    if meta:
        doc["_meta"] = meta
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> LatencyModel:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return LatencyModel(
        buckets=tuple(doc["buckets"]),
        weights=np.array(doc["weights"], dtype=np.float64),
        intercept=float(doc["intercept"]),
        ridge_lambda=float(doc["lambda"]),
        train_r2=float(doc["train_r2"]),
        holdout_r2=None if doc.get("holdout_r2") is None else float(doc["holdout_r2"]),
        channel_bands=bool(doc["channel_bands"]),
        space_ref=doc.get("space_ref", ""),
    )


def save_device(device: DeviceSimulator, path: str | Path, meta: dict | None = None) -> None:
    doc = {
        "name": device.name,
        "regular_conv": device.regular_conv,
        "depthwise_conv": device.depthwise_conv,
        "pointwise_conv": device.pointwise_conv,
        "se_block": device.se_block,
        "overhead_ms": device.overhead_ms,
        "noise_sigma": device.noise_sigma,
    }
    if meta:
        doc["_meta"] = meta
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_device(path: str | Path) -> DeviceSimulator:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    doc.pop("_meta", None)
    return DeviceSimulator(**doc)


def save_benchmarks(
    records: list[BenchmarkRecord],
    csv_path: str | Path,
    arch_dir: str | Path,
    meta_lines: list[str] | None = None,
) -> None:
    """Write ``arch_file,latency_ms`` rows; architectures go to ``arch_dir``."""
    csv_path = Path(csv_path)
    arch_dir = Path(arch_dir)
    arch_dir.mkdir(parents=True, exist_ok=True)
    width = max(5, int(math.log10(max(len(records), 1))) + 1)
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        for line in meta_lines or []:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(["arch_file", "latency_ms"])
        for i, record in enumerate(records):
            arch_path = arch_dir / f"arch_{i:0{width}d}.json"
            save_file(record.net, arch_path)
            try:
                ref = arch_path.relative_to(csv_path.parent)
            except ValueError:
                ref = arch_path
            writer.writerow([str(ref), f"{record.latency_ms:.9g}"])


def load_benchmarks(csv_path: str | Path) -> list[BenchmarkRecord]:
    """Read a benchmark CSV; arch paths resolve relative to the CSV."""
    csv_path = Path(csv_path)
    records = []
    with csv_path.open(newline="", encoding="utf-8") as fh:
        rows = [row for row in csv.reader(fh) if row and not row[0].startswith("#")]
    if not rows or rows[0] != ["arch_file", "latency_ms"]:
        raise ValueError(f"{csv_path}: expected header arch_file,latency_ms")
    for row in rows[1:]:
        ref = Path(row[0])
        if not ref.is_absolute():
            ref = csv_path.parent / ref
        records.append(BenchmarkRecord(load_file(ref), float(row[1])))
    return records
