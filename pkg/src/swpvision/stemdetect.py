"""Stem localization across a frame window.

Per-frame circle detection votes in a (cx, cy, r) accumulator driven by the
gradient direction at hysteresis-selected edge pixels.  Frames with anything
other than exactly one detection are discarded, the survivors are aggregated
by the mode of their rounded (cx, cy, r) triples, and the modal circle is
expanded into a padded square bounding box.
"""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .imaging import BoundingBox, Circle, Image, sobel, to_grayscale


class NoDetectionsError(ValueError):
    """Mode aggregation was asked to run on an empty detection list."""


class NoStemDetectedError(RuntimeError):
    """No frame in the detection window produced a usable detection."""


@dataclass(frozen=True)
class HoughConfig:
    """Circle-transform parameters.

    Defaults are calibrated on the seeded synthetic corpus (the upstream
    deployment never published its detector settings) and documented in the
    README as such.
    """

    r_min: int = 20
    r_max: int = 80
    edge_low: float = 60.0
    edge_high: float = 120.0
    accumulator_threshold: int = 40
    nms_min_center_dist: float = 20.0
    max_circles: int = 8

    def __post_init__(self) -> None:
        if not (1 <= self.r_min < self.r_max):
            raise ValueError(f"need 1 <= r_min < r_max, got [{self.r_min}, {self.r_max}]")
        if self.edge_low > self.edge_high:
            raise ValueError("edge_low must be <= edge_high")
        if self.accumulator_threshold < 1:
            raise ValueError("accumulator_threshold must be >= 1")


@dataclass(frozen=True)
class CircleDetection:
    circle: Circle
    votes: int


@dataclass(frozen=True)
class DetectionHistogram:
    """Occurrence counts of rounded (cx, cy, r) triples across frames."""

    counts: dict[tuple[int, int, int], int]

    def total(self) -> int:
        return sum(self.counts.values())


# Radius padding presets applied around the modal circle.
PADDING_PRESETS = {"H20": 20, "H30": 30, "H40": 40}


@dataclass(frozen=True)
class PaddingVariant:
    pad: int

    def __post_init__(self) -> None:
        if self.pad < 0:
            raise ValueError(f"padding must be >= 0, got {self.pad}")

    @classmethod
    def preset(cls, name: str) -> "PaddingVariant":
        key = name.upper()
        if key not in PADDING_PRESETS:
            raise ValueError(f"unknown padding preset {name!r}, expected one of {sorted(PADDING_PRESETS)}")
        return cls(PADDING_PRESETS[key])


@dataclass(frozen=True)
class HoughDetector:
    config: HoughConfig = field(default_factory=HoughConfig)
    padding: PaddingVariant = field(default_factory=lambda: PaddingVariant.preset("H30"))


@dataclass(frozen=True)
class LearnedDetector:
    """Box-regression model fused by a coordinate-wise median over frames."""

    model: object  # wetness.WetnessModel with a 4-output head


@dataclass(frozen=True)
class ManualDetector:
    """Pass-through of a human-annotated bounding box."""

    box: BoundingBox


DetectorKind = Union[HoughDetector, LearnedDetector, ManualDetector]


@dataclass(frozen=True)
class StemDetectionReport:
    """Outcome of one detection run, in the shape the report files use."""

    box: BoundingBox
    frames_used: int
    frames_discarded: int
    seconds: float = 0.0


def detect_circles(img: Image, cfg: HoughConfig) -> list[CircleDetection]:
    """Detect circles in a grayscale frame.

    Every hysteresis edge pixel casts two votes per candidate radius, at
    +/- its gradient direction.  The radius axis is collapsed by keeping the
    best-voted radius per center (smallest radius on ties), 2D local maxima
    above the accumulator threshold become candidates, and greedy
    non-maximum suppression removes any candidate whose center lies within
    `nms_min_center_dist` of a higher-voted one.  Output is sorted by votes
    descending and truncated at `max_circles`; the whole procedure is
    deterministic.
    """
    if img.channels != 1:
        raise ValueError("detect_circles expects a grayscale image")
    need = 2 * cfg.r_max + 1
    if img.width < need or img.height < need:
        raise ValueError(f"image must be at least {need}px in each dimension for r_max={cfg.r_max}")

    grad = sobel(img)
    edge_mask = _hysteresis(grad.magnitude, cfg.edge_low, cfg.edge_high)
    ys, xs = np.nonzero(edge_mask)
    if ys.size == 0:
        return []

    mag = grad.magnitude[ys, xs]
    safe = np.maximum(mag, 1e-12)
    ux = grad.gx[ys, xs] / safe
    uy = grad.gy[ys, xs] / safe

    h, w = img.height, img.width
    radii = np.arange(cfg.r_min, cfg.r_max + 1)
    vote_keys = []
    for ridx, r in enumerate(radii):
        for sign in (1.0, -1.0):
            cx = np.floor(xs + sign * r * ux + 0.5).astype(np.int64)
            cy = np.floor(ys + sign * r * uy + 0.5).astype(np.int64)
            ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
            if ok.any():
                vote_keys.append((cy[ok] * w + cx[ok]) * len(radii) + ridx)
    if not vote_keys:
        return []

    keys, counts = np.unique(np.concatenate(vote_keys), return_counts=True)
    center_idx = keys // len(radii)
    r_idx = keys % len(radii)
    # Best radius per center: highest count, smallest radius on ties.
    order = np.lexsort((r_idx, -counts, center_idx))
    first = np.ones(order.size, dtype=bool)
    first[1:] = center_idx[order][1:] != center_idx[order][:-1]
    best = order[first]

    votes2d = np.zeros(h * w, dtype=np.int64)
    votes2d[center_idx[best]] = counts[best]
    r_best = np.zeros(h * w, dtype=np.int64)
    r_best[center_idx[best]] = radii[r_idx[best]]
    votes2d = votes2d.reshape(h, w)
    r_best = r_best.reshape(h, w)

    candidates = _local_maxima(votes2d, cfg.accumulator_threshold)
    if not candidates:
        return []
    # Deterministic order: votes descending, then smallest (cx, cy).
    candidates.sort(key=lambda p: (-votes2d[p[1], p[0]], p[0], p[1]))

    kept: list[CircleDetection] = []
    min_d2 = cfg.nms_min_center_dist**2
    for cx, cy in candidates:
        if any((cx - k.circle.cx) ** 2 + (cy - k.circle.cy) ** 2 < min_d2 for k in kept):
            continue
        kept.append(
            CircleDetection(
                circle=Circle(cx=int(cx), cy=int(cy), r=int(r_best[cy, cx])),
                votes=int(votes2d[cy, cx]),
            )
        )
        if len(kept) >= cfg.max_circles:
            break
    return kept


def _hysteresis(magnitude: np.ndarray, low: float, high: float) -> np.ndarray:
    """Edge mask: pixels >= high, plus >= low pixels 8-connected to them."""
    weak = magnitude >= low
    visited = (magnitude >= high) & weak
    h, w = magnitude.shape
    weak_flat = weak.ravel()
    visited_flat = visited.ravel()
    frontier = np.flatnonzero(visited_flat)
    while frontier.size:
        fy, fx = frontier // w, frontier % w
        cand = []
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dy == 0 and dx == 0:
                    continue
                ny = fy + dy
                nx = fx + dx
                ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
                if ok.any():
                    cand.append(ny[ok] * w + nx[ok])
        if not cand:
            break
        neigh = np.unique(np.concatenate(cand))
        grow = neigh[weak_flat[neigh] & ~visited_flat[neigh]]
        visited_flat[grow] = True
        frontier = grow
    return visited_flat.reshape(h, w)


def _local_maxima(votes2d: np.ndarray, threshold: int) -> list[tuple[int, int]]:
    """(cx, cy) cells >= threshold that are >= all 8 neighbors."""
    h, w = votes2d.shape
    padded = np.pad(votes2d, 1, mode="constant")
    is_max = votes2d >= threshold
    for dy in (0, 1, 2):
        for dx in (0, 1, 2):
            if dy == 1 and dx == 1:
                continue
            is_max &= votes2d >= padded[dy : dy + h, dx : dx + w]
    ys, xs = np.nonzero(is_max)
    return [(int(x), int(y)) for x, y in zip(xs, ys)]


def filter_single(detections: Sequence[CircleDetection]) -> Optional[Circle]:
    """The detected circle when exactly one is present, else None.

    Frames with multiple detections are discarded because exactly one stem
    is in view.
    """
    if len(detections) == 1:
        return detections[0].circle
    return None


def build_histogram(circles: Sequence[Circle]) -> DetectionHistogram:
    return DetectionHistogram(counts=dict(Counter(c.as_tuple() for c in circles)))


def aggregate_mode(circles: Sequence[Circle]) -> Circle:
    """Most frequent (cx, cy, r) triple; ties go to the smallest triple."""
    if not circles:
        raise NoDetectionsError("cannot aggregate an empty detection list")
    hist = build_histogram(circles)
    triple = min(hist.counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
    return Circle(*triple)


def circle_to_box(c: Circle, pad: PaddingVariant, frame_w: int, frame_h: int) -> BoundingBox:
    """Square box of half-side r+pad around the circle, clamped to the frame."""
    if not (0 <= c.cx < frame_w and 0 <= c.cy < frame_h):
        raise ValueError(f"circle center ({c.cx},{c.cy}) outside {frame_w}x{frame_h} frame")
    half = c.r + pad.pad
    box = BoundingBox(c.cx - half, c.cy - half, c.cx + half, c.cy + half)
    return box.clamped(frame_w, frame_h)


FrameSequence = Sequence[Image]


def run_detector(frames: FrameSequence, detector: DetectorKind) -> StemDetectionReport:
    """detect_stem plus per-run bookkeeping (frames used/discarded)."""
    if len(frames) == 0:
        raise NoStemDetectedError("empty frame window")

    if isinstance(detector, ManualDetector):
        return StemDetectionReport(box=detector.box, frames_used=len(frames), frames_discarded=0)

    if isinstance(detector, HoughDetector):
        survivors: list[Circle] = []
        for frame in frames:
            circle = filter_single(detect_circles(to_grayscale(frame), detector.config))
            if circle is not None:
                survivors.append(circle)
        if not survivors:
            raise NoStemDetectedError("no frame in the window yielded a single detection")
        first = frames[0]
        mode = aggregate_mode(survivors)
        box = circle_to_box(mode, detector.padding, first.width, first.height)
        return StemDetectionReport(
            box=box, frames_used=len(survivors), frames_discarded=len(frames) - len(survivors)
        )

    if isinstance(detector, LearnedDetector):
        from .wetness import regress_box

        boxes = [regress_box(detector.model, frame) for frame in frames]
        coords = np.array([b.as_tuple() for b in boxes], dtype=np.float64)
        med = np.floor(np.median(coords, axis=0) + 0.5).astype(int)
        first = frames[0]
        box = BoundingBox(int(med[0]), int(med[1]), int(med[2]), int(med[3]))
        return StemDetectionReport(
            box=box.clamped(first.width, first.height),
            frames_used=len(frames),
            frames_discarded=0,
        )

    raise TypeError(f"unknown detector kind {type(detector).__name__}")


def detect_stem(frames: FrameSequence, detector: DetectorKind) -> BoundingBox:
    """Locate the stem over a frame window and return its padded box."""
    return run_detector(frames, detector).box


def time_detection(frames: FrameSequence, detector: DetectorKind) -> StemDetectionReport:
    """Run detection and report wall-clock seconds at millisecond precision."""
    start = time.perf_counter()
    report = run_detector(frames, detector)
    elapsed = round(time.perf_counter() - start, 3)
    return StemDetectionReport(
        box=report.box,
        frames_used=report.frames_used,
        frames_discarded=report.frames_discarded,
        seconds=elapsed,
    )
