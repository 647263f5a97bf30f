"""Synthetic slides whose labels can only be decided from neighboring tiles.

Every structure is a disc centered in one tile. Its class is encoded by a
ring drawn around it: none (class 1), about one tile away (class 2) or about
two tiles away (class 3). Only the disc is labeled, and the disc's own tile
renders identically for all three classes.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .tiling import SlideImage, write_label_mask

__all__ = ["SynthSpec", "generate_slide", "generate_slides", "generate_dataset", "slide_seeds", "load_dataset"]

TISSUE_RGB = (225, 150, 190)
DISC_RGB = (120, 60, 160)
RING_RGB = (60, 30, 110)


@dataclass(frozen=True)
class SynthSpec:
    rows: int = 16
    cols: int = 16
    tile_size_px: int = 64
    n_structures: int = 6
    disc_radius_px: tuple = (12, 18)
    ring_radius_tiles: tuple = (1.0, 2.0)
    ring_width_px: int = 6
    jitter_px: int = 6
    noise: float = 8.0
    n_holes: int = 3
    hole_size_tiles: int = 2
    min_separation_tiles: int = 5
    max_retries: int = 50
    force_class: int | None = None
    seed: int = 0

    def __post_init__(self):
        t = self.tile_size_px
        half_diag = math.sqrt(2.0) * (t / 2 + self.jitter_px)
        inner = min(self.ring_radius_tiles) * t - self.ring_width_px / 2
        if inner <= half_diag:
            raise ValueError("ring would intersect the disc's own tile")
        if max(self.disc_radius_px) + self.jitter_px >= t / 2:
            raise ValueError("disc must fit inside its tile")
        if self.force_class not in (None, 1, 2, 3):
            raise ValueError("force_class must be 1, 2 or 3")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "SynthSpec":
        doc = dict(doc)
        for key in ("disc_radius_px", "ring_radius_tiles"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(**doc)


def _place_structures(spec: SynthSpec, rng: np.random.Generator) -> list[tuple[int, int]]:
    for _ in range(spec.max_retries):
        placed: list[tuple[int, int]] = []
        for _ in range(50 * max(spec.n_structures, 1)):
            if len(placed) == spec.n_structures:
                break
            r, c = int(rng.integers(spec.rows)), int(rng.integers(spec.cols))
            if all(max(abs(r - pr), abs(c - pc)) >= spec.min_separation_tiles for pr, pc in placed):
                placed.append((r, c))
        if len(placed) == spec.n_structures:
            return placed
    raise ValueError(f"infeasible packing: could not place {spec.n_structures} structures")


def _place_holes(spec: SynthSpec, structures, rng: np.random.Generator) -> list[tuple[int, int]]:
    # holes stay clear of every ring footprint so all context tiles are tissue
    reach = int(math.ceil(max(spec.ring_radius_tiles)))
    s = spec.hole_size_tiles

    def clear(r, c):
        return all(
            r > pr + reach or r + s - 1 < pr - reach or c > pc + reach or c + s - 1 < pc - reach
            for pr, pc in structures
        )

    free = [(r, c) for r in range(spec.rows - s + 1) for c in range(spec.cols - s + 1) if clear(r, c)]
    holes: list[tuple[int, int]] = []
    for idx in rng.permutation(len(free)):
        if len(holes) == spec.n_holes:
            break
        r, c = free[idx]
        if all(max(abs(r - hr), abs(c - hc)) >= s for hr, hc in holes):
            holes.append((r, c))
    return holes


def generate_slide(spec: SynthSpec, slide_id: str = "synth") -> tuple[SlideImage, np.ndarray, dict]:
    """Render one slide, its label raster and a manifest of the structures."""
    layout_ss, class_ss, noise_ss = np.random.SeedSequence(spec.seed).spawn(3)
    layout = np.random.default_rng(layout_ss)
    t = spec.tile_size_px
    h, w = spec.rows * t, spec.cols * t

    structures = _place_structures(spec, layout) if spec.n_structures else []
    holes = _place_holes(spec, structures, layout)
    centers = [
        (r * t + t / 2 + layout.integers(-spec.jitter_px, spec.jitter_px + 1),
         c * t + t / 2 + layout.integers(-spec.jitter_px, spec.jitter_px + 1))
        for r, c in structures
    ]
    radii = [float(layout.uniform(*spec.disc_radius_px)) for _ in structures]
    drawn = np.random.default_rng(class_ss).integers(1, 4, size=len(structures))
    classes = [spec.force_class or int(k) for k in drawn]

    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = TISSUE_RGB
    labels = np.zeros((h, w), dtype=np.uint8)
    reach = int(math.ceil(max(spec.ring_radius_tiles) * t + spec.ring_width_px))
    manifest_structs = []
    for (r, c), (cy, cx), rad, k in zip(structures, centers, radii, classes):
        y0, y1 = max(int(cy) - reach, 0), min(int(cy) + reach + 1, h)
        x0, x1 = max(int(cx) - reach, 0), min(int(cx) + reach + 1, w)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        dist = np.hypot(yy + 0.5 - cy, xx + 0.5 - cx)
        view, lab = img[y0:y1, x0:x1], labels[y0:y1, x0:x1]
        ring_radius = None
        if k > 1:
            ring_radius = spec.ring_radius_tiles[k - 2] * t
            view[np.abs(dist - ring_radius) <= spec.ring_width_px / 2] = RING_RGB
        disc = dist <= rad
        view[disc] = DISC_RGB
        lab[disc] = k
        manifest_structs.append(
            {
                "tile": [r, c],
                "center_px": [float(cy), float(cx)],
                "disc_radius_px": rad,
                "class": k,
                "ring_radius_px": ring_radius,
            }
        )
    for r, c in holes:
        s = spec.hole_size_tiles * t
        img[r * t : r * t + s, c * t : c * t + s] = 255.0

    noise = np.random.default_rng(noise_ss).standard_normal(size=img.shape, dtype=np.float32) * spec.noise
    pixels = np.clip(np.rint(img + noise), 0, 255).astype(np.uint8)
    for r, c in holes:
        s = spec.hole_size_tiles * t
        pixels[r * t : r * t + s, c * t : c * t + s] = 255

    manifest = {
        "slide_id": slide_id,
        "seed": spec.seed,
        "structures": manifest_structs,
        "holes": [list(hc) for hc in holes],
    }
    return SlideImage(pixels, 1.0, slide_id), labels, manifest


def slide_seeds(seed: int, n_slides: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n_slides)]


def generate_slides(spec: SynthSpec, n_slides: int, seed: int):
    """Yield ``(slide, labels, manifest)`` for ``n_slides`` independently seeded slides."""
    for i, s in enumerate(slide_seeds(seed, n_slides)):
        yield generate_slide(replace(spec, seed=s), f"synth_{i:03d}")


def generate_dataset(spec: SynthSpec, n_slides: int, seed: int, out_dir) -> Path:
    """Write ``slides/<id>.img``, ``masks/<id>.lbl``, ``manifests/<id>.json`` and ``dataset.json``.

    Slides and masks are PNG-encoded.
    """
    out = Path(out_dir)
    for sub in ("slides", "masks", "manifests"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    ids = []
    for slide, labels, manifest in generate_slides(spec, n_slides, seed):
        sid = slide.slide_id
        Image.fromarray(slide.pixels, mode="RGB").save(out / "slides" / f"{sid}.img", format="PNG")
        write_label_mask(out / "masks" / f"{sid}.lbl", labels)
        (out / "manifests" / f"{sid}.json").write_text(json.dumps(manifest, indent=1))
        ids.append(sid)
    doc = {"spec": spec.to_json(), "n_slides": n_slides, "seed": seed, "slide_ids": ids}
    (out / "dataset.json").write_text(json.dumps(doc, indent=1))
    return out


def load_dataset(data_dir) -> list[tuple[SlideImage, np.ndarray]]:
    from .tiling import read_image, read_label_mask

    root = Path(data_dir)
    meta_path = root / "dataset.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{root}: missing dataset.json")
    ids = json.loads(meta_path.read_text())["slide_ids"]
    out = []
    for sid in ids:
        pixels = read_image(root / "slides" / f"{sid}.img")
        labels = read_label_mask(root / "masks" / f"{sid}.lbl")
        out.append((SlideImage(pixels, 1.0, sid), labels))
    return out
