"""Image tool semantics: selection, cropping, and the upscale rule."""

from __future__ import annotations

import io
import math

import numpy as np
import pytest
from PIL import Image
from hypothesis import given, settings
from hypothesis import strategies as st

from evrank.protocol import TOOL_SELECT, TOOL_ZOOM, ToolCall
from evrank.store import Candidate, Modality
from evrank.tools import (
    MIN_CROP_DIM,
    Observation,
    ToolError,
    execute,
    select_image,
    zoom_in,
)
from conftest import gradient_png, make_image_window, unique_pixel_png


def decode(png_bytes):
    return Image.open(io.BytesIO(png_bytes)).convert("RGB")


def text_candidate(i=0):
    return Candidate(id=f"txt-{i}", modality=Modality.TEXT, text="plain")


class TestSelect:
    def test_returns_requested_order_with_labels(self, tmp_path):
        window = make_image_window(tmp_path, 3)
        obs = select_image(window, [3, 1])
        assert [img.label for img in obs.images] == ["3", "1"]
        assert obs.images[0].data == (tmp_path / "win-2.png").read_bytes()
        assert obs.images[1].data == (tmp_path / "win-0.png").read_bytes()
        assert obs.note == "full images for candidates 3, 1"

    def test_bytes_passed_through_unchanged(self, tmp_path):
        path = tmp_path / "one.png"
        payload = unique_pixel_png(10, 10, 4, 6)
        path.write_bytes(payload)
        window = [
            Candidate(
                id="a", modality=Modality.IMAGE, image_ref=str(path)
            )
        ]
        obs = select_image(window, [1])
        assert obs.images[0].data == payload

    def test_media_type_follows_extension(self, tmp_path):
        path = tmp_path / "a.jpg"
        path.write_bytes(b"fake jpeg bytes")
        window = [Candidate(id="a", modality=Modality.IMAGE, image_ref=str(path))]
        obs = select_image(window, [1])
        assert obs.images[0].media_type == "image/jpeg"

    def test_out_of_range_rejected(self, tmp_path):
        window = make_image_window(tmp_path, 1)
        with pytest.raises(ToolError, match="out of range"):
            select_image(window, [2])

    def test_empty_request_rejected(self, tmp_path):
        window = make_image_window(tmp_path, 1)
        with pytest.raises(ToolError, match="no indices"):
            select_image(window, [])

    def test_text_only_candidate(self):
        with pytest.raises(ToolError, match="no image"):
            select_image([text_candidate()], [1])

    def test_missing_file(self, tmp_path):
        window = [
            Candidate(
                id="a",
                modality=Modality.IMAGE,
                image_ref=str(tmp_path / "gone.png"),
            )
        ]
        with pytest.raises(ToolError, match="not found"):
            select_image(window, [1])


class TestZoom:
    def test_center_crop_frozen_oracle(self):
        # 100x100 gradient, bbox (.25, .25, .75, .75):
        #   x range [floor(25), ceil(75)) = [25, 75), same for y -> 50x50.
        obs = zoom_in(gradient_png(100, 100), (0.25, 0.25, 0.75, 0.75))
        img = decode(obs.images[0].data)
        assert img.size == (50, 50)
        # Pixel (0,0) of the crop is source pixel (25,25) = (25, 25, 7).
        assert img.getpixel((0, 0)) == (25, 25, 7)
        assert img.getpixel((49, 49)) == (74, 74, 7)

    def test_small_crop_upscaled_nearest(self):
        # bbox (0.10, 0.10, 0.18, 0.30) on 100x100:
        #   x [10, 18) -> 8 wide, y [10, 30) -> 20 tall. min dim 8 < 16,
        #   factor ceil(16/8) = 2, result 16x40 in 2x2 pixel blocks.
        obs = zoom_in(gradient_png(100, 100), (0.10, 0.10, 0.18, 0.30))
        img = decode(obs.images[0].data)
        assert img.size == (16, 40)
        # NEAREST at an integer factor duplicates pixels exactly.
        assert img.getpixel((0, 0)) == (10, 10, 7)
        assert img.getpixel((1, 1)) == (10, 10, 7)
        assert img.getpixel((2, 0)) == (11, 10, 7)
        assert img.getpixel((15, 39)) == (17, 29, 7)

    def test_full_bbox_is_lossless(self):
        src = gradient_png(24, 24)
        obs = zoom_in(src, (0.0, 0.0, 1.0, 1.0))
        img = decode(obs.images[0].data)
        assert img.size == (24, 24)
        assert np.array_equal(np.asarray(img), np.asarray(decode(src)))

    def test_fractional_edges_round_outward(self):
        # On a 10-wide image, x in (0.05, 0.12) covers pixels
        # [floor(0.5), ceil(1.2)) = [0, 2): the touched pixels survive.
        obs = zoom_in(gradient_png(10, 10), (0.05, 0.0, 0.12, 1.0))
        img = decode(obs.images[0].data)
        factor = math.ceil(MIN_CROP_DIM / 2)
        assert img.size == (2 * factor, 10 * factor)
        assert img.getpixel((0, 0)) == (0, 0, 7)
        assert img.getpixel((2 * factor - 1, 0)) == (1, 0, 7)

    def test_label_passes_through(self):
        obs = zoom_in(gradient_png(32, 32), (0.0, 0.0, 1.0, 1.0), label="2")
        assert obs.images[0].label == "2"
        assert obs.note == "zoomed region of candidate 2"

    @pytest.mark.parametrize(
        "bbox,reason",
        [
            ((0.5, 0.0, 0.5, 1.0), "degenerate"),
            ((0.7, 0.0, 0.2, 1.0), "degenerate"),
            ((0.0, 0.9, 1.0, 0.1), "degenerate"),
            ((-0.1, 0.0, 1.0, 1.0), "lie in"),
            ((0.0, 0.0, 1.2, 1.0), "lie in"),
            ((0.0, 0.0, 1.0), "four coordinates"),
            ((0.0, 0.0, 0.5, 0.5, 0.5), "four coordinates"),
        ],
    )
    def test_bad_bbox(self, bbox, reason):
        with pytest.raises(ToolError, match=reason):
            zoom_in(gradient_png(8, 8), bbox)

    def test_corrupt_image_bytes(self):
        with pytest.raises(ToolError, match="undecodable"):
            zoom_in(b"not a png", (0.0, 0.0, 1.0, 1.0))

    def test_min_dim_boundary_not_upscaled(self):
        # Exactly MIN_CROP_DIM on the short side: no upscale.
        obs = zoom_in(gradient_png(64, 64), (0.0, 0.0, 0.25, 1.0))
        assert decode(obs.images[0].data).size == (16, 64)

    def test_one_pixel_crop_upscales_to_min_dim(self):
        obs = zoom_in(gradient_png(4, 4), (0.0, 0.0, 0.25, 0.25))
        img = decode(obs.images[0].data)
        assert img.size == (MIN_CROP_DIM, MIN_CROP_DIM)
        pixels = np.asarray(img).reshape(-1, 3)
        assert np.array_equal(pixels, np.tile([0, 0, 7], (len(pixels), 1)))

    @given(
        width=st.integers(20, 60),
        height=st.integers(20, 60),
        x0=st.floats(0.0, 0.8),
        y0=st.floats(0.0, 0.8),
        dx=st.floats(0.15, 0.2),
        dy=st.floats(0.15, 0.2),
    )
    @settings(max_examples=50, deadline=None)
    def test_crop_pixels_match_source_property(self, width, height, x0, y0, dx, dy):
        x1 = min(1.0, x0 + dx)
        y1 = min(1.0, y0 + dy)
        obs = zoom_in(gradient_png(width, height), (x0, y0, x1, y1))
        img = decode(obs.images[0].data)

        px0, px1 = math.floor(x0 * width), min(width, math.ceil(x1 * width))
        py0, py1 = math.floor(y0 * height), min(height, math.ceil(y1 * height))
        crop_w, crop_h = px1 - px0, py1 - py0
        factor = 1
        if min(crop_w, crop_h) < MIN_CROP_DIM:
            factor = math.ceil(MIN_CROP_DIM / min(crop_w, crop_h))
        assert img.size == (crop_w * factor, crop_h * factor)

        # Every sampled output pixel maps back to exactly one source pixel
        # whose gradient color is known in closed form.
        for ox, oy in [(0, 0), (img.width - 1, img.height - 1),
                       (img.width // 2, img.height // 2)]:
            sx, sy = px0 + ox // factor, py0 + oy // factor
            assert img.getpixel((ox, oy)) == (sx % 256, sy % 256, 7)


class TestExecute:
    def window(self, tmp_path):
        window = make_image_window(tmp_path, 2)
        window.append(text_candidate())
        return window

    def test_dispatch_select(self, tmp_path):
        call = ToolCall(tool=TOOL_SELECT, select_indices=(2, 1))
        obs = execute(call, self.window(tmp_path))
        assert isinstance(obs, Observation)
        assert [img.label for img in obs.images] == ["2", "1"]

    def test_dispatch_zoom(self, tmp_path):
        call = ToolCall(tool=TOOL_ZOOM, zoom_target=1, bbox=(0.0, 0.0, 1.0, 1.0))
        obs = execute(call, self.window(tmp_path))
        assert obs.images[0].label == "1"
        assert decode(obs.images[0].data).size == (40, 40)

    def test_zoom_target_out_of_range(self, tmp_path):
        call = ToolCall(tool=TOOL_ZOOM, zoom_target=4, bbox=(0.0, 0.0, 1.0, 1.0))
        with pytest.raises(ToolError, match="out of range"):
            execute(call, self.window(tmp_path))

    def test_zoom_text_only_candidate(self, tmp_path):
        call = ToolCall(tool=TOOL_ZOOM, zoom_target=3, bbox=(0.0, 0.0, 1.0, 1.0))
        with pytest.raises(ToolError, match="no image"):
            execute(call, self.window(tmp_path))

    def test_unknown_tool(self, tmp_path):
        call = ToolCall(tool="teleport")
        with pytest.raises(ToolError, match="unknown tool"):
            execute(call, self.window(tmp_path))

    def test_window_is_not_mutated(self, tmp_path):
        window = self.window(tmp_path)
        snapshot = [
            (c.id, c.modality, c.text, c.image_ref, c.embedding_row)
            for c in window
        ]
        execute(ToolCall(tool=TOOL_SELECT, select_indices=(1,)), window)
        assert snapshot == [
            (c.id, c.modality, c.text, c.image_ref, c.embedding_row)
            for c in window
        ]

    def test_error_carries_tool_name(self, tmp_path):
        call = ToolCall(tool=TOOL_SELECT, select_indices=(9,))
        with pytest.raises(ToolError) as err:
            execute(call, self.window(tmp_path))
        assert err.value.tool == TOOL_SELECT
        assert "9" in err.value.reason
