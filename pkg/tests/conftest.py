"""Shared synthetic-data helpers for the test suite."""

import numpy as np
import pytest

from facedeblur.dataio import FrameSequence


def moving_blob_clip(n_frames=7, size=64, clip_id="clip", seed=0, travel=0.7):
    """Clip of a bright blob sweeping left-to-right over a fixed textured
    background; eye positions track the blob center."""
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.1, 0.45, size=(size, size, 3)).astype(np.float32)
    # smooth the texture a little so it is not pure noise
    base = (base + np.roll(base, 1, 0) + np.roll(base, 1, 1)) / 3.0

    yy, xx = np.mgrid[0:size, 0:size]
    frames, eyes = [], []
    margin = size * (1 - travel) / 2
    for i in range(n_frames):
        t = i / max(n_frames - 1, 1)
        cx = margin + travel * size * t
        cy = size / 2 + 0.15 * size * np.sin(2 * np.pi * t)
        blob = np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * (size / 10) ** 2)))
        halo = np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * (size / 4) ** 2)))
        frame = base.copy()
        frame[..., 0] = np.clip(frame[..., 0] + 0.9 * blob - 0.3 * halo, 0, 1)
        frame[..., 1] = np.clip(frame[..., 1] + 0.7 * blob - 0.2 * halo, 0, 1)
        frame[..., 2] = np.clip(frame[..., 2] + 0.4 * blob, 0, 1)
        frames.append(frame.astype(np.float32))
        eyes.append((int(round(cx)), int(round(cy))))
    return FrameSequence(frames=frames, eye_positions=eyes, clip_id=clip_id,
                         original_indices=list(range(1, n_frames + 1)))


def random_clip(n_frames, size=32, clip_id="rand", seed=0):
    """Uncorrelated random frames with random in-bounds eye positions."""
    rng = np.random.default_rng(seed)
    frames = [rng.random((size, size, 3)).astype(np.float32) for _ in range(n_frames)]
    eyes = [(int(rng.integers(0, size)), int(rng.integers(0, size))) for _ in range(n_frames)]
    return FrameSequence(frames=frames, eye_positions=eyes, clip_id=clip_id,
                         original_indices=list(range(1, n_frames + 1)))


@pytest.fixture
def blob_clip():
    return moving_blob_clip()


@pytest.fixture
def tiny_dataset(tmp_path):
    """Two 32x32 clips, one 5-frame window each; returns the manifest path."""
    from facedeblur.dataio import build_dataset
    clips = [moving_blob_clip(n_frames=5, size=32, clip_id=f"clip{i}", seed=i)
             for i in range(2)]
    out = tmp_path / "dataset"
    build_dataset(clips, [5], out)
    return out / "manifest.jsonl"
