"""Visual evidence tools: fetch candidate images and zoom into regions."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from PIL import Image

from .protocol import TOOL_SELECT, TOOL_ZOOM, ToolCall, _media_type
from .store import Candidate

# Crops narrower or shorter than this are upscaled before attachment so the
# policy model still receives a legible image.
MIN_CROP_DIM = 16


class ToolError(Exception):
    def __init__(self, tool: str, message: str):
        super().__init__(f"{tool}: {message}")
        self.tool = tool
        self.reason = message


@dataclass(frozen=True)
class ObservationImage:
    label: str
    data: bytes
    media_type: str


@dataclass(frozen=True)
class Observation:
    """Successful tool output: one or more labeled images plus a note."""

    images: tuple[ObservationImage, ...]
    note: str


def _read_image_bytes(tool: str, candidate: Candidate) -> bytes:
    if candidate.image_ref is None:
        raise ToolError(tool, f"candidate {candidate.id!r} has no image")
    path = Path(candidate.image_ref)
    if not path.is_file():
        raise ToolError(tool, f"image file not found: {candidate.image_ref}")
    return path.read_bytes()


def select_image(window: Sequence[Candidate], indices: Sequence[int]) -> Observation:
    """Return the referenced candidates' images at full stored resolution.

    Indices are 1-based window positions; images come back in request order,
    labeled by position. The stored bytes are passed through unchanged.
    """
    if not indices:
        raise ToolError(TOOL_SELECT, "no indices requested")
    images = []
    for idx in indices:
        if not (1 <= idx <= len(window)):
            raise ToolError(
                TOOL_SELECT, f"index {idx} out of range [1, {len(window)}]"
            )
        cand = window[idx - 1]
        data = _read_image_bytes(TOOL_SELECT, cand)
        images.append(
            ObservationImage(
                label=str(idx), data=data, media_type=_media_type(cand.image_ref)
            )
        )
    positions = ", ".join(str(i) for i in indices)
    return Observation(
        images=tuple(images), note=f"full images for candidates {positions}"
    )


def zoom_in(data: bytes, bbox: Sequence[float], label: str = "zoom") -> Observation:
    """Crop a normalized bbox region out of an image, losslessly re-encoded.

    The pixel rectangle is [floor(x0*W), ceil(x1*W)) x [floor(y0*H),
    ceil(y1*H)), clamped to the image. Crops whose smaller side is under
    MIN_CROP_DIM pixels are upscaled by an integer factor (nearest neighbor,
    so pixel values survive exactly).
    """
    if len(bbox) != 4:
        raise ToolError(TOOL_ZOOM, "bbox must have four coordinates")
    x0, y0, x1, y1 = (float(v) for v in bbox)
    if not (0.0 <= x0 <= 1.0 and 0.0 <= y0 <= 1.0 and x1 <= 1.0 and y1 <= 1.0):
        raise ToolError(TOOL_ZOOM, "bbox coordinates must lie in [0, 1]")
    if x0 >= x1 or y0 >= y1:
        raise ToolError(TOOL_ZOOM, "degenerate bbox: zero area")
    try:
        img = Image.open(io.BytesIO(data))
        img.load()
    except Exception as exc:
        raise ToolError(TOOL_ZOOM, f"undecodable image: {exc}") from None

    w, h = img.size
    px0 = max(0, math.floor(x0 * w))
    py0 = max(0, math.floor(y0 * h))
    px1 = min(w, math.ceil(x1 * w))
    py1 = min(h, math.ceil(y1 * h))
    if px1 <= px0 or py1 <= py0:
        raise ToolError(TOOL_ZOOM, "degenerate bbox: zero area after clamping")

    crop = img.crop((px0, py0, px1, py1))
    cw, ch = crop.size
    smaller = min(cw, ch)
    if smaller < MIN_CROP_DIM:
        factor = math.ceil(MIN_CROP_DIM / smaller)
        crop = crop.resize((cw * factor, ch * factor), Image.NEAREST)

    buf = io.BytesIO()
    crop.save(buf, format="PNG")
    return Observation(
        images=(ObservationImage(label=label, data=buf.getvalue(), media_type="image/png"),),
        note=f"zoomed region of candidate {label}",
    )


def execute(call: ToolCall, window: Sequence[Candidate]) -> Observation:
    """Dispatch a parsed tool call against the current window.

    Pure with respect to the window. Raises ToolError on any failure;
    callers decide how failures feed back into the episode.
    """
    if call.tool == TOOL_SELECT:
        return select_image(window, call.select_indices)
    if call.tool == TOOL_ZOOM:
        target = call.zoom_target
        if not (1 <= target <= len(window)):
            raise ToolError(
                TOOL_ZOOM, f"target {target} out of range [1, {len(window)}]"
            )
        data = _read_image_bytes(TOOL_ZOOM, window[target - 1])
        obs = zoom_in(data, call.bbox, label=str(target))
        return obs
    raise ToolError(call.tool, "unknown tool")
