"""Static overlay images for qualitative inspection (PNG emission only)."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

# background stays unpainted; parts follow the generator's palette ordering
PART_COLORS = {
    1: (235, 194, 158),   # head
    2: (64, 115, 217),    # torso
    3: (217, 84, 69),     # arm
    4: (84, 184, 89),     # leg
    5: (230, 212, 64),    # hat
}
_EXTRA = [(196, 64, 196), (64, 196, 196), (196, 196, 64), (128, 128, 255)]


def part_color(label: int):
    if label in PART_COLORS:
        return PART_COLORS[label]
    return _EXTRA[(label - 1) % len(_EXTRA)]


def overlay(frame: np.ndarray, part_labels: np.ndarray, instances=()) -> np.ndarray:
    """Blend part labels over the frame and outline instance boxes.

    frame: (3,H,W) in [0,1]; part_labels: (H,W) ints; returns (H,W,3) uint8.
    """
    img = (np.transpose(frame, (1, 2, 0)) * 255.0).clip(0, 255).astype(np.float64)
    for label in np.unique(part_labels):
        if label == 0:
            continue
        mask = part_labels == label
        color = np.asarray(part_color(int(label)), dtype=np.float64)
        img[mask] = 0.45 * img[mask] + 0.55 * color
    H, W = part_labels.shape
    for inst in instances:
        x0, y0, x1, y1 = (int(round(v)) for v in inst["box"])
        x0, y0 = max(0, x0), max(0, y0)
        x1, y1 = min(W - 1, x1), min(H - 1, y1)
        if x1 <= x0 or y1 <= y0:
            continue
        img[y0, x0:x1 + 1] = img[y1, x0:x1 + 1] = 255.0
        img[y0:y1 + 1, x0] = img[y0:y1 + 1, x1] = 255.0
    return img.astype(np.uint8)


def save_overlay_png(path, frame: np.ndarray, part_labels: np.ndarray,
                     instances=()) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay(frame, part_labels, instances)).save(path, format="PNG")
