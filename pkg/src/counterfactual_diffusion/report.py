"""Side-by-side grids: original | counterfactual | absolute difference heatmap."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from pathlib import Path

import matplotlib
import numpy as np
import torch
from PIL import Image

from .dataset import load_png, to_uint8
from .pipeline import MANIFEST_NAME, BenchmarkManifest

_LOGGER = logging.getLogger(__name__)

GRID_NAME = "grid.png"
COLUMNS = 3


def _rgb(image: torch.Tensor) -> np.ndarray:
    pixels = to_uint8(image)
    if pixels.ndim == 2:
        pixels = np.repeat(pixels[..., None], 3, axis=-1)
    return pixels


def difference_heatmap(
    original: torch.Tensor, counterfactual: torch.Tensor, colormap: str = "inferno"
) -> np.ndarray:
    """Channel-averaged |original - counterfactual| mapped through a colour map, as uint8 RGB.

    The full pixel range [-1, 1] gives differences in [0, 2], normalized to [0, 1].
    """
    difference = (original - counterfactual).abs().mean(dim=0).numpy() / 2.0
    colors = matplotlib.colormaps[colormap](np.clip(difference, 0.0, 1.0))
    return (colors[..., :3] * 255).round().astype(np.uint8)


def render_grid(
    pairs: Sequence[tuple[torch.Tensor, torch.Tensor]], scale: int = 4, padding: int = 2
) -> Image.Image:
    """One row per pair; tiles are upscaled with nearest-neighbour sampling."""
    if not pairs:
        return Image.new("RGB", (padding, padding), "white")
    height, width = pairs[0][0].shape[-2:]
    tile_h, tile_w = height * scale, width * scale
    grid = Image.new(
        "RGB",
        (COLUMNS * (tile_w + padding) + padding, len(pairs) * (tile_h + padding) + padding),
        "white",
    )
    for row, (original, counterfactual) in enumerate(pairs):
        tiles = (
            _rgb(original),
            _rgb(counterfactual),
            difference_heatmap(original, counterfactual),
        )
        for column, tile in enumerate(tiles):
            image = Image.fromarray(tile).resize((tile_w, tile_h), Image.Resampling.NEAREST)
            grid.paste(
                image, (padding + column * (tile_w + padding), padding + row * (tile_h + padding))
            )
    return grid


def write_report(manifest_path: Path, out_path: Path | None = None) -> Path:
    """Render the grid for every record of a benchmark manifest."""
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    manifest = BenchmarkManifest.read(manifest_path)
    root = manifest_path.parent
    manifest.verify(root)
    pairs = [
        (load_png(root / record["original"]), load_png(root / record["explanation"]))
        for record in manifest.records
    ]
    out_path = out_path or root / GRID_NAME
    render_grid(pairs).save(out_path)
    _LOGGER.info("Wrote %s rows to %s", len(pairs), out_path)
    return out_path
