"""Dataset construction: frame ingestion, motion reordering, blur synthesis, manifests.

Pixel data is float32 in [0, 1] everywhere in memory; files on disk are 8-bit
RGB PNG. Eye positions are integer pixel coordinates (column x, row y).
"""

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from .errors import InvalidInputError

log = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
MIN_WINDOW = 5
MAX_WINDOW = 13


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass
class FrameSequence:
    """Consecutive sharp frames of one clip window plus per-frame left-eye positions."""

    frames: list            # list of (H, W, 3) float arrays in [0, 1]
    eye_positions: list     # list of (x, y) integer pixel coordinates
    clip_id: str
    original_indices: list  # 1-based temporal indices within the window

    def __post_init__(self):
        n = len(self.frames)
        if n == 0:
            raise InvalidInputError("frame sequence is empty")
        if len(self.eye_positions) != n or len(self.original_indices) != n:
            raise InvalidInputError(
                "frames, eye_positions and original_indices must have equal length "
                f"(got {n}, {len(self.eye_positions)}, {len(self.original_indices)})"
            )
        h, w = self.frames[0].shape[:2]
        for f in self.frames:
            if f.shape != self.frames[0].shape:
                raise InvalidInputError("all frames must share one shape")
        for x, y in self.eye_positions:
            if not (0 <= x < w and 0 <= y < h):
                raise InvalidInputError(f"eye position ({x}, {y}) outside {w}x{h} frame")


@dataclass
class ReorderedSequence:
    """Frames re-sorted by eye motion, each tagged with its control factor."""

    frames: list
    control_factors: list   # k / N for rank k = 0..N-1
    permutation: list       # reordered position -> original 1-based index


@dataclass
class BlurSample:
    """One blurred image together with its reordered ground-truth frames."""

    blur: np.ndarray
    gt_frames: ReorderedSequence
    clip_id: str
    n_frames: int


@dataclass
class ManifestRecord:
    blur_path: str
    gt_paths: list
    control_factors: list
    clip_id: str
    n_frames: int


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def counts_by_n(self):
        counts = {}
        for r in self.records:
            counts[r.n_frames] = counts.get(r.n_frames, 0) + 1
        return dict(sorted(counts.items()))


# ---------------------------------------------------------------------------
# image i/o
# ---------------------------------------------------------------------------

def load_image(path):
    """Read an 8-bit RGB image file into a float32 array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_image(path, img):
    """Quantize a float [0, 1] image to 8 bits and write it as PNG."""
    arr = np.clip(np.asarray(img, dtype=np.float32), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


# ---------------------------------------------------------------------------
# camera response functions
# ---------------------------------------------------------------------------

def identity_response(x):
    return x

def gamma_response(x, gamma=2.2):
    return np.power(x, 1.0 / gamma)


# ---------------------------------------------------------------------------
# reordering and blur synthesis
# ---------------------------------------------------------------------------

def motion_reorder(seq: FrameSequence) -> ReorderedSequence:
    """Re-sort frames by left-eye position and assign control factors.

    Sort key is (x, y, original index) ascending: left-to-right first, ties
    top-to-bottom, remaining ties in temporal order. Rank k out of N gets
    control factor k / N.
    """
    n = len(seq.frames)
    order = sorted(
        range(n),
        key=lambda j: (seq.eye_positions[j][0], seq.eye_positions[j][1],
                       seq.original_indices[j]),
    )
    return ReorderedSequence(
        frames=[seq.frames[j] for j in order],
        control_factors=[k / n for k in range(n)],
        permutation=[seq.original_indices[j] for j in order],
    )


def synthesize_blur(seq: FrameSequence, response=None) -> np.ndarray:
    """Average the frames and map the result through a camera response function."""
    if response is None:
        response = identity_response
    stack = np.stack(seq.frames).astype(np.float64)
    mean = stack.mean(axis=0)
    blur = response(mean)
    return np.clip(blur, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _resize(img, new_w, new_h):
    out = cv2.resize(img, (new_w, new_h), interpolation=cv2.INTER_LINEAR)
    return np.ascontiguousarray(out)


def augment_sample(sample: BlurSample, rng, scale_range=(1.0, 1.5), crop=256) -> BlurSample:
    """Apply one random scale factor and one random crop window to the blur
    and every ground-truth frame jointly."""
    h, w = sample.blur.shape[:2]
    lo, hi = scale_range
    if min(h, w) * hi < crop:
        raise InvalidInputError(
            f"{w}x{h} image cannot cover a {crop} crop even at scale {hi}"
        )
    # never sample a scale that leaves the image smaller than the crop
    lo = max(lo, crop / min(h, w))
    scale = float(rng.uniform(lo, hi))
    if scale != 1.0:
        new_h = max(round(h * scale), crop)
        new_w = max(round(w * scale), crop)
    else:
        new_h, new_w = h, w

    def transform(img, y0, x0):
        if scale != 1.0:
            img = _resize(img, new_w, new_h)
        return img[y0:y0 + crop, x0:x0 + crop].copy()
    y0 = int(rng.integers(0, new_h - crop + 1))
    x0 = int(rng.integers(0, new_w - crop + 1))

    gt = ReorderedSequence(
        frames=[transform(f, y0, x0) for f in sample.gt_frames.frames],
        control_factors=list(sample.gt_frames.control_factors),
        permutation=list(sample.gt_frames.permutation),
    )
    return BlurSample(
        blur=transform(sample.blur, y0, x0),
        gt_frames=gt,
        clip_id=sample.clip_id,
        n_frames=sample.n_frames,
    )


# ---------------------------------------------------------------------------
# eye-position sidecar files
# ---------------------------------------------------------------------------

def load_eye_sidecar(path):
    """Parse a `frame_index,x,y` sidecar; returns {frame_index: (x, y)}."""
    positions = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise InvalidInputError(f"{path}:{lineno}: expected frame_index,x,y")
            idx, x, y = (int(p) for p in parts)
            positions[idx] = (x, y)
    return positions


def load_clip(clip_dir, eyes_path) -> FrameSequence:
    """Load every frame of a clip directory with its eye-position sidecar."""
    clip_dir = Path(clip_dir)
    frame_files = sorted(
        p for p in clip_dir.iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp")
    )
    if not frame_files:
        raise InvalidInputError(f"no frames found in {clip_dir}")
    eyes = load_eye_sidecar(eyes_path)
    missing = [i for i in range(1, len(frame_files) + 1) if i not in eyes]
    if missing:
        raise InvalidInputError(
            f"{eyes_path} lacks eye positions for frames {missing[:5]} of {clip_dir.name}"
        )
    frames = [load_image(p) for p in frame_files]
    return FrameSequence(
        frames=frames,
        eye_positions=[eyes[i] for i in range(1, len(frame_files) + 1)],
        clip_id=clip_dir.name,
        original_indices=list(range(1, len(frame_files) + 1)),
    )


# ---------------------------------------------------------------------------
# manifest i/o
# ---------------------------------------------------------------------------

def write_manifest(manifest: DatasetManifest, path):
    """Write a manifest as line-delimited JSON: header line, then one record per line."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"schema_version": manifest.schema_version}) + "\n")
        for r in manifest.records:
            fh.write(json.dumps({
                "blur_path": r.blur_path,
                "gt_paths": r.gt_paths,
                "control_factors": r.control_factors,
                "clip_id": r.clip_id,
                "n_frames": r.n_frames,
            }) + "\n")
    os.replace(tmp, path)


def read_manifest(path, check_files=True) -> DatasetManifest:
    """Read a manifest written by :func:`write_manifest`.

    Relative record paths are interpreted against the manifest's directory.
    With ``check_files`` every referenced image must exist.
    """
    path = Path(path)
    root = path.parent
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in (l.strip() for l in fh) if line]
    if not lines:
        raise InvalidInputError(f"{path} is empty")
    header = json.loads(lines[0])
    version = header.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise InvalidInputError(f"unsupported manifest schema_version {version!r}")
    records = []
    for line in lines[1:]:
        d = json.loads(line)
        rec = ManifestRecord(
            blur_path=d["blur_path"],
            gt_paths=list(d["gt_paths"]),
            control_factors=[float(u) for u in d["control_factors"]],
            clip_id=d["clip_id"],
            n_frames=int(d["n_frames"]),
        )
        if len(rec.gt_paths) != len(rec.control_factors) or len(rec.gt_paths) != rec.n_frames:
            raise InvalidInputError(
                f"record for {rec.clip_id}: gt_paths/control_factors/n_frames disagree"
            )
        records.append(rec)
    manifest = DatasetManifest(records=records, schema_version=version)
    if check_files:
        missing = []
        for r in manifest.records:
            for p in [r.blur_path] + r.gt_paths:
                if not (root / p).exists():
                    missing.append(str(root / p))
        if missing:
            raise FileNotFoundError(
                f"manifest references {len(missing)} missing files: " + ", ".join(missing[:10])
            )
    return manifest


def resolve_path(manifest_path, rel_path):
    """Resolve a record path against its manifest location."""
    return Path(manifest_path).parent / rel_path


# ---------------------------------------------------------------------------
# dataset construction
# ---------------------------------------------------------------------------

def window_sample(seq: FrameSequence, response=None) -> BlurSample:
    """Reorder one window and synthesize its blurred image."""
    return BlurSample(
        blur=synthesize_blur(seq, response),
        gt_frames=motion_reorder(seq),
        clip_id=seq.clip_id,
        n_frames=len(seq.frames),
    )


def build_dataset(clips, n_frames_choices, out_dir, response=None) -> DatasetManifest:
    """Slide non-overlapping windows of each chosen length over every clip,
    synthesize blur/ground-truth pairs, and write images plus a manifest.

    ``clips`` is an iterable of FrameSequence covering whole clips. Returns the
    manifest (also written to ``out_dir/manifest.jsonl``).
    """
    for n in n_frames_choices:
        if not (MIN_WINDOW <= n <= MAX_WINDOW):
            raise InvalidInputError(
                f"window length {n} outside supported range [{MIN_WINDOW}, {MAX_WINDOW}]"
            )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifest = DatasetManifest()
    for clip in clips:
        total = len(clip.frames)
        if total < min(n_frames_choices):
            log.warning("clip %s has %d frames, shorter than the smallest window; skipped",
                        clip.clip_id, total)
            continue
        for n in n_frames_choices:
            n_windows = total // n
            if n_windows == 0:
                log.warning("clip %s has %d frames, too short for %d-frame windows",
                            clip.clip_id, total, n)
                continue
            for w in range(n_windows):
                start = w * n
                window = FrameSequence(
                    frames=clip.frames[start:start + n],
                    eye_positions=clip.eye_positions[start:start + n],
                    clip_id=clip.clip_id,
                    original_indices=list(range(1, n + 1)),
                )
                sample = window_sample(window, response)
                rec_dir = out_dir / clip.clip_id / f"n{n:02d}_w{w:03d}"
                rec_dir.mkdir(parents=True, exist_ok=True)
                blur_rel = f"{clip.clip_id}/n{n:02d}_w{w:03d}/blur.png"
                save_image(out_dir / blur_rel, sample.blur)
                gt_rels = []
                for k, frame in enumerate(sample.gt_frames.frames):
                    rel = f"{clip.clip_id}/n{n:02d}_w{w:03d}/gt_{k:02d}.png"
                    save_image(out_dir / rel, frame)
                    gt_rels.append(rel)
                manifest.records.append(ManifestRecord(
                    blur_path=blur_rel,
                    gt_paths=gt_rels,
                    control_factors=sample.gt_frames.control_factors,
                    clip_id=clip.clip_id,
                    n_frames=n,
                ))
    write_manifest(manifest, out_dir / "manifest.jsonl")
    for n, count in manifest.counts_by_n().items():
        log.info("windows of %d frames: %d records", n, count)
    return manifest
