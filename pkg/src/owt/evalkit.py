"""Downstream measurements: reconstruction metrics, threshold segmentation,
group-level retrieval, linear probing, analytic cost accounting, and a 2-D
projection export for inspecting group separation."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class EvalError(ValueError):
    """Inputs outside an evaluation routine's contract."""


DEFAULT_NOISE_FLOOR = 0.02
DEFAULT_MASK_THRESHOLD = 0.15


def _flat_image(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    return arr


def mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise EvalError(f"mse shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def masked_mse(a, b, region: np.ndarray) -> float:
    """MSE restricted to the pixels where ``region`` is true."""
    a = _flat_image(a)
    b = _flat_image(b)
    region = np.asarray(region, dtype=bool)
    if a.shape != b.shape or region.shape != a.shape:
        raise EvalError(f"masked_mse shapes differ: {a.shape}/{b.shape}/{region.shape}")
    if not region.any():
        raise EvalError("empty region")
    return float(np.mean((a[region] - b[region]) ** 2))


def ssim(a, b, window: int = 8) -> float:
    """Mean structural similarity over uniform sliding windows (stride 1).

    Single-channel images in [0, 1]; C1 = 0.01^2, C2 = 0.03^2; population
    window statistics.
    """
    a = _flat_image(a)
    b = _flat_image(b)
    if a.shape != b.shape:
        raise EvalError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise EvalError("ssim expects single-channel images")
    if min(a.shape) < window:
        raise EvalError(f"image {a.shape} smaller than the {window}x{window} window")
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    wa = sliding_window_view(a, (window, window)).reshape(-1, window * window)
    wb = sliding_window_view(b, (window, window)).reshape(-1, window * window)
    mu_a = wa.mean(axis=1)
    mu_b = wb.mean(axis=1)
    var_a = wa.var(axis=1)
    var_b = wb.var(axis=1)
    cov = (wa * wb).mean(axis=1) - mu_a * mu_b
    score = ((2 * mu_a * mu_b + c1) * (2 * cov + c2) /
             ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(score.mean())


def segment_by_threshold(recon, noise_floor: float = DEFAULT_NOISE_FLOOR,
                         mask_threshold: float = DEFAULT_MASK_THRESHOLD) -> np.ndarray:
    """Binary mask from a single-group reconstruction: small values are
    zeroed as noise first, then the mask keeps magnitudes >= the threshold."""
    if not noise_floor < mask_threshold:
        raise EvalError(f"noise floor {noise_floor} must be below mask threshold {mask_threshold}")
    img = _flat_image(recon)
    cleaned = np.where(np.abs(img) < noise_floor, 0.0, img)
    return np.abs(cleaned) >= mask_threshold


def dice(mask_a, mask_b) -> float:
    """Overlap 2|A&B| / (|A|+|B|); two empty masks score 1."""
    a = np.asarray(mask_a)
    b = np.asarray(mask_b)
    if a.shape != b.shape:
        raise EvalError(f"dice shapes differ: {a.shape} vs {b.shape}")
    for m in (a, b):
        if m.dtype != bool and not np.isin(m, (0, 1)).all():
            raise EvalError("dice inputs must be binary")
    a = a.astype(bool)
    b = b.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def indirect_mask(image, complement_recons, noise_floor: float = DEFAULT_NOISE_FLOOR,
                  mask_threshold: float = DEFAULT_MASK_THRESHOLD,
                  expected_count: int | None = None) -> np.ndarray:
    """Mask a group by subtracting every other group's reconstruction from
    the input and thresholding the residual."""
    if expected_count is not None and len(complement_recons) != expected_count:
        raise EvalError(f"need {expected_count} complementary reconstructions, "
                        f"got {len(complement_recons)}")
    if not complement_recons:
        raise EvalError("no complementary reconstructions given")
    residual = _flat_image(image).copy()
    for recon in complement_recons:
        residual -= _flat_image(recon)
    return segment_by_threshold(residual, noise_floor, mask_threshold)


# ---------------------------------------------------------------------------
# retrieval


def retrieve_topk(query_tokens, index: list[tuple], k: int) -> list[tuple[object, float]]:
    """Euclidean nearest neighbours on flattened token blocks.

    ``index`` holds (case_id, tokens) pairs; results are ascending by
    distance with ties broken by case id.  k larger than the index returns
    the whole index, ordered.
    """
    if not index:
        raise EvalError("empty retrieval index")
    q = np.asarray(query_tokens, dtype=np.float64).reshape(-1)
    scored = []
    for case_id, tokens in index:
        vec = np.asarray(tokens, dtype=np.float64).reshape(-1)
        if vec.shape != q.shape:
            raise EvalError(f"index entry {case_id!r} has {vec.size} values, query has {q.size}")
        scored.append((float(np.sqrt(np.sum((vec - q) ** 2))), case_id))
    scored.sort(key=lambda pair: (pair[0], str(pair[1])))
    return [(case_id, dist) for dist, case_id in scored[:k]]


def write_retrieval_csv(rows: list[tuple], path) -> None:
    """Rows of (case_id, group, dist)."""
    with open(path, "w") as fh:
        fh.write("case_id,group,dist\n")
        for case_id, group, dist in rows:
            fh.write(f"{case_id},{group},{dist:.8g}\n")


# ---------------------------------------------------------------------------
# linear probe


def linear_probe(features, labels, split=0.5, iterations: int = 500,
                 lr: float = 0.1) -> float:
    """Accuracy of a logistic regression on frozen features.

    Full-batch gradient descent for a fixed iteration count; features are
    standardized by training-split statistics.  ``split`` is either the
    training fraction (leading samples train) or a (train_idx, test_idx)
    pair.
    """
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if X.shape[0] != y.size:
        raise EvalError(f"{X.shape[0]} feature rows vs {y.size} labels")
    if isinstance(split, tuple):
        train_idx, test_idx = (np.asarray(s, dtype=int) for s in split)
    else:
        cut = int(round(split * X.shape[0]))
        train_idx = np.arange(cut)
        test_idx = np.arange(cut, X.shape[0])
    if len(np.unique(y[train_idx])) < 2:
        raise EvalError("training split needs both classes")
    mu = X[train_idx].mean(axis=0)
    sd = X[train_idx].std(axis=0)
    sd[sd < 1e-8] = 1.0
    Xn = (X - mu) / sd
    Xn = np.concatenate([Xn, np.ones((Xn.shape[0], 1))], axis=1)
    w = np.zeros(Xn.shape[1])
    Xtr, ytr = Xn[train_idx], y[train_idx]
    for _ in range(iterations):
        p = 1.0 / (1.0 + np.exp(-(Xtr @ w)))
        w -= lr * Xtr.T @ (p - ytr) / len(ytr)
    pred = (Xn[test_idx] @ w) > 0
    return float((pred == (y[test_idx] > 0.5)).mean())


# ---------------------------------------------------------------------------
# cost accounting


def linear_layer_flops(tokens: int, d_in: int, d_out: int) -> int:
    """True floating-point ops of an affine map on ``tokens`` rows (2 per MAC)."""
    return 2 * tokens * d_in * d_out


def _block_macs(tokens: int, dim: int) -> int:
    # qkv projections, output projection, and the 4x MLP; attention-core
    # data products and norms are excluded (the projection-MAC convention
    # standard profilers report for transformers)
    return 12 * tokens * dim * dim


@dataclass(frozen=True)
class FlopsBreakdown:
    """Per-stage projection multiply-accumulates for one forward pass.

    Values are MACs; the conventional "GFLOPs" figure reported for vision
    transformers equals these counts / 1e9.
    """

    encoder: int
    collector: int
    group_encoder: int
    restorer: int
    decoder: int

    @property
    def total(self) -> int:
        return (self.encoder + self.collector + self.group_encoder +
                self.restorer + self.decoder)

    def gflops(self) -> dict[str, float]:
        stages = {
            "encoder": self.encoder,
            "collector": self.collector,
            "group_encoder": self.group_encoder,
            "restorer": self.restorer,
            "decoder": self.decoder,
            "total": self.total,
        }
        return {name: count / 1e9 for name, count in stages.items()}


def count_flops(dim: int, heads: int, tokens: int, enc_blocks: int, dec_blocks: int,
                tge_blocks: int = 0, group_tokens: int = 0,
                n_retained: int | None = None) -> FlopsBreakdown:
    """Closed-form cost of one forward pass (analytic, not measured).

    ``group_tokens`` = 0 describes the plain encoder/decoder baseline: the
    collector, group-encoder, and restorer stages then cost nothing.
    ``n_retained`` defaults to keeping every group token.
    """
    if dim % heads:
        raise EvalError(f"dim {dim} not divisible by heads {heads}")
    kept = group_tokens if n_retained is None else n_retained
    if group_tokens:
        collector = tokens * dim * group_tokens + tokens * dim * dim
        group_encoder = tge_blocks * _block_macs(kept, dim)
        restorer = kept * dim * tokens + kept * dim * dim
    else:
        collector = group_encoder = restorer = 0
    return FlopsBreakdown(
        encoder=enc_blocks * _block_macs(tokens, dim),
        collector=collector,
        group_encoder=group_encoder,
        restorer=restorer,
        decoder=dec_blocks * _block_macs(tokens, dim),
    )


# ---------------------------------------------------------------------------
# 2-D projection (power iteration, deterministic)


@dataclass
class ProjectionResult:
    coords: np.ndarray               # [n, k] with k <= requested dims
    explained_variance: list[float]  # fraction of total variance per axis
    degenerate: bool                 # true if rank ran out before dims


def pca_project(vectors, dims: int = 2, seed: int = 0,
                iterations: int = 300) -> ProjectionResult:
    """Top principal directions via iterated power method with deflation."""
    X = np.asarray(vectors, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < dims + 1:
        raise EvalError(f"need at least {dims + 1} vectors of equal width, got {X.shape}")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / X.shape[0]
    total_var = float(np.trace(cov))
    rng = np.random.default_rng(seed)
    components = []
    variances = []
    degenerate = False
    work = cov.copy()
    for _ in range(dims):
        v = rng.normal(size=cov.shape[0])
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iterations):
            nxt = work @ v
            norm = np.linalg.norm(nxt)
            if norm < 1e-14:
                break
            nxt /= norm
            if np.abs(nxt - v).max() < 1e-12 or np.abs(nxt + v).max() < 1e-12:
                v = nxt
                break
            v = nxt
        lam = float(v @ work @ v)
        if lam <= max(total_var, 1.0) * 1e-12:
            degenerate = True
            break
        components.append(v)
        variances.append(lam / total_var if total_var > 0 else 0.0)
        work = work - lam * np.outer(v, v)
    if not components:
        return ProjectionResult(np.zeros((X.shape[0], 0)), [], True)
    basis = np.stack(components, axis=1)
    return ProjectionResult(Xc @ basis, variances, degenerate)


def write_projection_csv(rows: list[tuple], path) -> None:
    """Rows of (case_id, group, x, y)."""
    with open(path, "w") as fh:
        fh.write("case_id,group,x,y\n")
        for case_id, group, x, y in rows:
            fh.write(f"{case_id},{group},{x:.8g},{y:.8g}\n")


# ---------------------------------------------------------------------------
# aggregated report


@dataclass
class MetricReport:
    """Per-sample metric lists plus their means and run provenance."""

    per_sample_mse: list[float] = field(default_factory=list)
    per_sample_ssim: list[float] = field(default_factory=list)
    per_group_dice: dict[int, list[float]] = field(default_factory=dict)
    model_hash: str = ""
    dataset_hash: str = ""
    noise_floor: float = DEFAULT_NOISE_FLOOR
    mask_threshold: float = DEFAULT_MASK_THRESHOLD

    def aggregates(self) -> dict:
        out: dict = {}
        if self.per_sample_mse:
            out["mse"] = float(np.mean(self.per_sample_mse))
        if self.per_sample_ssim:
            out["ssim"] = float(np.mean(self.per_sample_ssim))
        if self.per_group_dice:
            out["dice"] = {str(g): float(np.mean(v))
                           for g, v in sorted(self.per_group_dice.items()) if v}
        return out

    def to_json(self) -> str:
        doc = {
            "aggregates": self.aggregates(),
            "per_sample": {
                "mse": self.per_sample_mse,
                "ssim": self.per_sample_ssim,
                "dice": {str(g): v for g, v in sorted(self.per_group_dice.items())},
            },
            "metadata": {
                "model_hash": self.model_hash,
                "dataset_hash": self.dataset_hash,
                "noise_floor": self.noise_floor,
                "mask_threshold": self.mask_threshold,
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
