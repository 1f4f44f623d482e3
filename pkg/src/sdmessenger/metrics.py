"""Dice, Jaccard, average symmetric surface distance and HD95 for 2D masks."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError

METRICS = ("dice", "jaccard", "asd", "hd95")


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p, g = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if p.shape != g.shape:
        raise ContractError(f"mask shapes differ: {p.shape} vs {g.shape}")
    return p, g


def dice(pred, gt) -> float:
    p, g = _pair(pred, gt)
    total = int(p.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / total


def jaccard(pred, gt) -> float:
    p, g = _pair(pred, gt)
    union = int((p | g).sum())
    if union == 0:
        return 1.0
    return int((p & g).sum()) / union


def boundary(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask or outside the image."""
    padded = np.pad(mask, 1, constant_values=False)
    interior = ndimage.binary_erosion(padded, structure=ndimage.generate_binary_structure(2, 1),
                                      border_value=0)[1:-1, 1:-1]
    return mask & ~interior


def _directed(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    """Distance from every ``src`` boundary pixel to the nearest ``dst`` boundary pixel."""
    dist = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return dist[src]


def surface_distances(pred, gt, spacing=(1.0, 1.0)) -> tuple[float, float]:
    """``(asd, hd95)``; both are NaN ("undefined") when either mask is empty."""
    p, g = _pair(pred, gt)
    if not p.any() or not g.any():
        return math.nan, math.nan
    bp, bg = boundary(p), boundary(g)
    d_pg = _directed(bp, bg, spacing)
    d_gp = _directed(bg, bp, spacing)
    asd = 0.5 * (float(d_pg.mean()) + float(d_gp.mean()))
    hd95 = float(np.percentile(np.concatenate([d_pg, d_gp]), 95))
    return asd, hd95


def class_metrics(pred_map: np.ndarray, gt_map: np.ndarray, num_classes: int) -> dict[int, dict[str, float]]:
    out = {}
    for c in range(1, num_classes):
        p, g = pred_map == c, gt_map == c
        asd, hd = surface_distances(p, g)
        out[c] = {"dice": dice(p, g), "jaccard": jaccard(p, g), "asd": asd, "hd95": hd}
    return out


@dataclass
class MetricReport:
    """Per-class means over samples (undefined values skipped) and their mean over foreground classes."""

    per_class: dict[int, dict[str, float]]
    mean: dict[str, float]
    sample_count: int
    undefined: dict[int, int] = field(default_factory=dict)
    split: str = "test"
    domains: tuple[int, ...] = ()
    seed: int | None = None

    @classmethod
    def aggregate(cls, per_sample: list[dict[int, dict[str, float]]], **provenance) -> "MetricReport":
        classes = sorted(per_sample[0]) if per_sample else []
        per_class, undefined = {}, {}
        for c in classes:
            per_class[c] = {}
            for m in METRICS:
                vals = [s[c][m] for s in per_sample if not math.isnan(s[c][m])]
                per_class[c][m] = sum(vals) / len(vals) if vals else math.nan
            undefined[c] = sum(math.isnan(s[c]["asd"]) for s in per_sample)
        mean = {}
        for m in METRICS:
            vals = [per_class[c][m] for c in classes if not math.isnan(per_class[c][m])]
            mean[m] = sum(vals) / len(vals) if vals else math.nan
        return cls(per_class, mean, len(per_sample), undefined, **provenance)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", *METRICS, "undefined_surface", "samples", "split", "domains", "seed"])
        prov = [self.sample_count, self.split, ";".join(map(str, self.domains)), "" if self.seed is None else self.seed]
        for c, vals in self.per_class.items():
            w.writerow([c, *(repr(vals[m]) for m in METRICS), self.undefined.get(c, 0), *prov])
        w.writerow(["mean", *(repr(self.mean[m]) for m in METRICS), sum(self.undefined.values()), *prov])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        per_class, undefined, mean = {}, {}, {}
        for row in rows:
            vals = {m: float(row[m]) for m in METRICS}
            if row["class"] == "mean":
                mean = vals
            else:
                per_class[int(row["class"])] = vals
                undefined[int(row["class"])] = int(row["undefined_surface"])
        first = rows[0]
        domains = tuple(int(d) for d in first["domains"].split(";") if d)
        seed = int(first["seed"]) if first["seed"] else None
        return cls(per_class, mean, int(first["samples"]), undefined, first["split"], domains, seed)

    def to_text(self) -> str:
        lines = [f"split={self.split} samples={self.sample_count} domains={list(self.domains)} seed={self.seed}",
                 f"{'class':>6} {'dice':>8} {'jaccard':>8} {'asd':>8} {'hd95':>8} {'undef':>6}"]
        for c, v in self.per_class.items():
            lines.append(f"{c:>6} {v['dice']:8.4f} {v['jaccard']:8.4f} {v['asd']:8.4f} {v['hd95']:8.4f} "
                         f"{self.undefined.get(c, 0):>6}")
        m = self.mean
        lines.append(f"{'mean':>6} {m['dice']:8.4f} {m['jaccard']:8.4f} {m['asd']:8.4f} {m['hd95']:8.4f}")
        return "\n".join(lines) + "\n"


def evaluate(model, data, split: str = "test", batch_size: int = 16, seed: int | None = None) -> MetricReport:
    """Predict every sample of ``split`` and aggregate per-class metrics in index order."""
    import torch  # local: metrics stays usable without torch for pure mask work

    images, labels = data.images(split), data.labels(split)
    if images is None or labels is None:
        raise ContractError(f"split {split!r} is empty or unlabeled")
    num_classes = labels.shape[1]
    per_sample = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            _, pred = model.predict(images[start:start + batch_size])
            gt = labels[start:start + batch_size].argmax(1)
            for p, g in zip(pred.numpy(), gt.numpy()):
                per_sample.append(class_metrics(p, g, num_classes))
    model.train(was_training)
    domains = tuple(sorted({s.domain_id for s in data.samples(split)}))
    return MetricReport.aggregate(per_sample, split=split, domains=domains, seed=seed)
