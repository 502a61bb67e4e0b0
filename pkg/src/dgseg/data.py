"""Dataset ingestion: image/label I/O, tiling, label remapping, benchmark
splits, and a synthetic two-domain scene generator for small experiments."""

from __future__ import annotations

import hashlib
import json
import logging
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError, DimensionError

log = logging.getLogger(__name__)

IGNORE_INDEX = 255
IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp", ".npy")
MAPPING_FORMAT = "dgseg.label_mapping"


@dataclass
class SegSample:
    image: np.ndarray  # (C, H, W) float in [0, 1]
    label: np.ndarray  # (H, W) integer class ids
    domain: str = ""
    path: str = ""
    origin: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[1:] != self.label.shape:
            raise DimensionError(f"image {self.image.shape} and label {self.label.shape} disagree spatially")


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def list_images(root: str | Path) -> list[Path]:
    root = Path(root)
    return sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_EXTS)


def load_image(path: str | Path) -> np.ndarray:
    """Read an image as float32 ``(C, H, W)`` scaled to [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        arr = np.load(path).astype(np.float32)
        return arr if arr.ndim == 3 else arr[None]
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def load_label(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".npy":
        return np.load(path).astype(np.int64)
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            raise DataError(f"{path}: label maps must be single-channel index images, got mode {im.mode}")
        return np.asarray(im, dtype=np.int64)


def save_image(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def save_label(path: str | Path, label: np.ndarray) -> None:
    if label.min() < 0 or label.max() > 255:
        raise DataError("label values must fit in 8 bits")
    Image.fromarray(label.astype(np.uint8), mode="L").save(path)


def sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# tiling
# ---------------------------------------------------------------------------

def _padded_extent(size: int, tile: int, stride: int) -> int:
    if size <= tile:
        return tile
    return tile + stride * -(-(size - tile) // stride)


def tile(image: np.ndarray, label: np.ndarray, tile_size: int, stride: int | None = None,
         pad: bool = True, domain: str = "", path: str = "") -> list[SegSample]:
    """Cut an image/label pair into raster-ordered tiles.

    The right/bottom remainder is covered by reflect-padding the image up to the
    next tile position; the padded label area is filled with the ignore index so
    fabricated pixels never count as ground truth.
    """
    stride = tile_size if stride is None else stride
    if tile_size <= 0 or stride <= 0:
        raise ConfigurationError(f"tile size and stride must be positive, got {tile_size}/{stride}")
    c, h, w = image.shape
    if label.shape != (h, w):
        raise DimensionError(f"image {image.shape} and label {label.shape} disagree spatially")
    if not pad and (tile_size > h or tile_size > w):
        raise ConfigurationError(f"tile {tile_size} exceeds image {h}x{w} and padding is disabled")
    ph, pw = _padded_extent(h, tile_size, stride), _padded_extent(w, tile_size, stride)
    if not pad:
        ph = tile_size + stride * ((h - tile_size) // stride)
        pw = tile_size + stride * ((w - tile_size) // stride)
    img = image
    lab = label
    if ph > h or pw > w:
        img = np.pad(image, ((0, 0), (0, ph - h), (0, pw - w)), mode="reflect" if h > 1 and w > 1 else "edge")
        lab = np.pad(label, ((0, ph - h), (0, pw - w)), constant_values=IGNORE_INDEX)
    tiles = []
    for r in range(0, ph - tile_size + 1, stride):
        for q in range(0, pw - tile_size + 1, stride):
            tiles.append(SegSample(img[:, r:r + tile_size, q:q + tile_size].copy(),
                                   lab[r:r + tile_size, q:q + tile_size].copy(), domain, path, (r, q)))
    return tiles


def stitch(tiles: Sequence[SegSample], shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`tile`: paste tiles at their origins and crop padding."""
    c = tiles[0].image.shape[0]
    ts = tiles[0].image.shape[1]
    ph = max(t.origin[0] for t in tiles) + ts
    pw = max(t.origin[1] for t in tiles) + ts
    img = np.zeros((c, ph, pw), dtype=tiles[0].image.dtype)
    lab = np.zeros((ph, pw), dtype=tiles[0].label.dtype)
    for t in tiles:
        r, q = t.origin
        img[:, r:r + ts, q:q + ts] = t.image
        lab[r:r + ts, q:q + ts] = t.label
    return img[:, :shape[0], :shape[1]], lab[:shape[0], :shape[1]]


# ---------------------------------------------------------------------------
# label remapping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MappingRule:
    source: str
    source_id: int
    target: str | None  # None drops the class to the ignore index


@dataclass(frozen=True)
class LabelMapping:
    name: str
    rules: tuple[MappingRule, ...]
    classes: tuple[str, ...]
    version: int = 1

    def __post_init__(self):
        ids = [r.source_id for r in self.rules]
        if len(set(ids)) != len(ids):
            raise DataError(f"mapping {self.name}: a source class appears in more than one rule")
        unknown = {r.target for r in self.rules if r.target is not None} - set(self.classes)
        if unknown:
            raise DataError(f"mapping {self.name}: targets {sorted(unknown)} not in the class list")

    def target_id(self, rule: MappingRule) -> int:
        return IGNORE_INDEX if rule.target is None else self.classes.index(rule.target)

    def lut(self) -> np.ndarray:
        table = np.full(256, -1, dtype=np.int64)
        table[IGNORE_INDEX] = IGNORE_INDEX
        for r in self.rules:
            table[r.source_id] = self.target_id(r)
        return table

    @classmethod
    def identity(cls, k: int) -> "LabelMapping":
        names = tuple(str(i) for i in range(k))
        return cls("identity", tuple(MappingRule(n, i, n) for i, n in enumerate(names)), names)

    @classmethod
    def from_dict(cls, d: dict) -> "LabelMapping":
        if d.get("format") != MAPPING_FORMAT:
            raise DataError(f"not a label-mapping file (format={d.get('format')!r})")
        rules = tuple(MappingRule(r["source"], int(r["source_id"]), r["target"]) for r in d["rules"])
        return cls(d["name"], rules, tuple(d["classes"]), int(d["version"]))

    def to_dict(self) -> dict:
        return {"format": MAPPING_FORMAT, "version": self.version, "name": self.name,
                "classes": list(self.classes),
                "rules": [{"source": r.source, "source_id": r.source_id, "target": r.target} for r in self.rules]}


def load_mapping(name_or_path: str | Path) -> LabelMapping:
    """Load a shipped mapping by name (e.g. ``"rescuenet_to_potsdam"``) or from a JSON path."""
    p = Path(name_or_path)
    if p.suffix == ".json" and p.exists():
        return LabelMapping.from_dict(json.loads(p.read_text()))
    res = resources.files("dgseg.mappings").joinpath(f"{name_or_path}.json")
    if not res.is_file():
        raise DataError(f"unknown label mapping {name_or_path!r}")
    return LabelMapping.from_dict(json.loads(res.read_text()))


def shipped_mappings() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("dgseg.mappings").iterdir() if p.name.endswith(".json"))


def remap_labels(label: np.ndarray, mapping: LabelMapping) -> np.ndarray:
    """Pixelwise lookup; values without a rule raise :class:`DataError`."""
    label = np.asarray(label)
    if label.size and (label.min() < 0 or label.max() > 255):
        raise DataError(f"label values outside 0..255 cannot be remapped (min {label.min()}, max {label.max()})")
    out = mapping.lut()[label]
    bad = out < 0
    if bad.any():
        vals, counts = np.unique(label[bad], return_counts=True)
        detail = ", ".join(f"{v} ({c} px)" for v, c in zip(vals, counts))
        raise DataError(f"mapping {mapping.name}: unmapped source values {detail}")
    return out


# ---------------------------------------------------------------------------
# benchmark layout
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Benchmark:
    id: str
    group: str
    source: str
    target: str
    train: int
    test: int
    size: int
    classes: int
    styled_mask: tuple[float, int] | None = None  # (tau_m, B)
    masked_mask: tuple[float, int] | None = None


def _b(id, group, src, tgt, ntr, nte, size, k, styled=None, masked=None):
    return Benchmark(id, group, src, tgt, ntr, nte, size, k, styled, masked)


_CASID_N = {"sub": 4900, "tem": 5025, "tms": 3400, "trf": 3700}
_CASID_TEST = {"sub": 2200, "tem": 2075, "tms": 1650, "trf": 1550}
_CASID_NAME = {"sub": "Sub", "tem": "Tem", "tms": "Tms", "trf": "Trf"}
_CASID_MASKS = {"sub": ((0.1, 64), (0.7, 64)), "tem": ((0.1, 64), (0.7, 128)),
                "tms": ((0.1, 64), (0.7, 64)), "trf": ((0.5, 64), (0.7, 64))}

BENCHMARKS: dict[str, Benchmark] = {b.id: b for b in [
    _b("P(i)2V", "isprs", "potsdam_irrg", "vaihingen_irrg", 3456, 398, 512, 6, (0.7, 64), (0.7, 64)),
    _b("V2P(i)", "isprs", "vaihingen_irrg", "potsdam_irrg", 344, 2016, 512, 6, (0.5, 32), (0.7, 64)),
    _b("P(r)2P(i)", "isprs", "potsdam_rgb", "potsdam_irrg", 3456, 2016, 512, 6, (0.3, 16), (0.7, 64)),
    _b("P(i)2P(r)", "isprs", "potsdam_irrg", "potsdam_rgb", 3456, 2016, 512, 6, (0.7, 64), (0.7, 64)),
    _b("P(r)2V", "isprs", "potsdam_rgb", "vaihingen_irrg", 3456, 398, 512, 6, (0.3, 16), (0.7, 64)),
    _b("V2P(r)", "isprs", "vaihingen_irrg", "potsdam_rgb", 344, 2016, 512, 6, (0.5, 32), (0.7, 64)),
    _b("U2R", "loveda", "urban", "rural", 1156, 992, 1024, 7, (0.1, 64), (0.7, 64)),
    _b("R2U", "loveda", "rural", "urban", 1366, 667, 1024, 7, (0.5, 16), (0.7, 64)),
    _b("D2M", "deepglobe_massachusetts", "deepglobe", "massachusetts", 6226, 49, 1024, 1, (0.3, 16), (0.5, 16)),
    _b("P(r)2Res", "potsdam_rescuenet", "potsdam_rgb", "rescuenet", 3456, 449, 512, 5, (0.3, 16), (0.7, 64)),
    _b("P(i)2Res", "potsdam_rescuenet", "potsdam_irrg", "rescuenet", 3456, 449, 512, 5, (0.5, 32), (0.7, 64)),
    _b("U2OEM", "loveda_oem", "loveda_urban", "openearthmap", 1156, 384, 1024, 6),
    _b("D2G", "deepglobe_globalroadnet", "deepglobe", "globalroadnet", 6226, 241, 1024, 1),
    _b("A2S", "whu_building", "aerial", "satellite_ii", 4736, 3726, 512, 1, (0.5, 16), (0.7, 64)),
    _b("S2A", "whu_building", "satellite_ii", "aerial", 13662, 1036, 512, 1, (0.5, 16), (0.7, 16)),
    _b("A2S-I", "whu_building", "aerial", "satellite_i", 4736, 204, 512, 1),
] + [
    _b(f"{_CASID_NAME[s]}2{_CASID_NAME[t]}", "casid", s, t, _CASID_N[s], _CASID_TEST[t], 1024, 5, *_CASID_MASKS[s])
    for s in _CASID_N for t in _CASID_N if s != t
]}


def _domain_dir(root: Path, group: str, domain: str, split: str) -> Path:
    base = root / group / domain
    return base / split if (base / split).is_dir() else base


def pair_files(domain_dir: Path) -> list[tuple[Path, Path]]:
    """Pair ``images/<stem>.*`` with ``labels/<stem>.*`` in lexicographic stem order."""
    img_dir, lab_dir = domain_dir / "images", domain_dir / "labels"
    images = {p.stem: p for p in list_images(img_dir)} if img_dir.is_dir() else {}
    labels = {p.stem: p for p in list_images(lab_dir)} if lab_dir.is_dir() else {}
    orphans = sorted(set(images) - set(labels))
    if orphans:
        raise DataError(f"{domain_dir}: images without labels: {orphans}")
    return [(images[s], labels[s]) for s in sorted(images)]


def build_split(root: str | Path, benchmark_id: str, manifest: dict | str | Path | None = None) -> dict:
    """Resolve the source-train and target-test file pairs of a benchmark.

    Returns ``{"train": [...], "test": [...], "warnings": [...], "counts": {...}}``.
    When ``manifest`` (a dict or JSON file mapping benchmark id to
    ``{"train": n, "test": n}``) is given, the found counts are checked against it.
    """
    if benchmark_id not in BENCHMARKS:
        raise ConfigurationError(f"unknown benchmark {benchmark_id!r}")
    bench = BENCHMARKS[benchmark_id]
    root = Path(root)
    train = pair_files(_domain_dir(root, bench.group, bench.source, "train"))
    test = pair_files(_domain_dir(root, bench.group, bench.target, "test"))
    notes = []
    for split, items in (("train", train), ("test", test)):
        if not items:
            msg = f"{benchmark_id}: no {split} pairs found under {root / bench.group}"
            notes.append({"level": "warning", "split": split, "message": msg})
            warnings.warn(msg, stacklevel=2)
    counts = {"train": len(train), "test": len(test)}
    result = {"train": train, "test": test, "warnings": notes, "counts": counts}
    if manifest is not None:
        if not isinstance(manifest, dict):
            manifest = json.loads(Path(manifest).read_text())
        expected = manifest.get(benchmark_id)
        if expected is not None:
            ok = all(counts[k] == expected[k] for k in ("train", "test") if k in expected)
            result["count_check"] = {"expected": expected, "found": counts, "ok": ok}
            if not ok:
                notes.append({"level": "warning", "message": f"{benchmark_id}: counts {counts} != manifest {expected}"})
    return result


def load_pairs(pairs: Iterable[tuple[Path, Path]], domain: str = "") -> list[SegSample]:
    return [SegSample(load_image(i), load_label(l), domain, str(i)) for i, l in pairs]


def preprocess_domain(src_dir: Path, out_dir: Path, tile_size: int, stride: int | None = None,
                      mapping: LabelMapping | None = None, domain: str = "") -> dict:
    """Tile (and optionally remap) every pair under ``src_dir`` and write the
    results to ``out_dir/{images,labels}``; returns a manifest record."""
    pairs = pair_files(src_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    hist: dict[int, int] = {}
    files = []
    for img_path, lab_path in pairs:
        image, label = load_image(img_path), load_label(lab_path)
        if mapping is not None:
            label = remap_labels(label, mapping)
        for t in tile(image, label, tile_size, stride, domain=domain, path=str(img_path)):
            stem = f"{img_path.stem}_r{t.origin[0]:05d}_c{t.origin[1]:05d}"
            ip, lp = out_dir / "images" / f"{stem}.png", out_dir / "labels" / f"{stem}.png"
            save_image(ip, t.image)
            save_label(lp, t.label)
            vals, cnts = np.unique(t.label, return_counts=True)
            for v, c in zip(vals.tolist(), cnts.tolist()):
                hist[v] = hist.get(v, 0) + c
            files.append({"image": ip.name, "label": lp.name, "image_sha256": sha256(ip), "label_sha256": sha256(lp)})
    return {"domain": domain, "source_pairs": len(pairs), "tiles": len(files),
            "class_histogram": {str(k): v for k, v in sorted(hist.items())}, "files": files}


# ---------------------------------------------------------------------------
# synthetic two-domain scenes
# ---------------------------------------------------------------------------

_BASE_PALETTE = np.array([
    [0.40, 0.45, 0.35],
    [0.62, 0.38, 0.30],
    [0.30, 0.36, 0.60],
    [0.55, 0.58, 0.28],
    [0.28, 0.55, 0.52],
    [0.60, 0.30, 0.55],
])

# domain B: global per-channel gain/offset (a spectral-band-like shift)
DOMAIN_B_GAIN = np.array([0.8, 1.15, 0.85])
DOMAIN_B_OFFSET = np.array([0.30, -0.30, 0.28])


def _palette(k: int) -> np.ndarray:
    if k <= len(_BASE_PALETTE):
        return _BASE_PALETTE[:k]
    extra = np.random.default_rng(1234).uniform(0.25, 0.65, size=(k - len(_BASE_PALETTE), 3))
    return np.vstack([_BASE_PALETTE, extra])


def _scene_labels(rng: np.random.Generator, size: int, k: int) -> np.ndarray:
    """Background plus 2-4 filled shapes; shape type is tied to the class id."""
    lab = np.zeros((size, size), dtype=np.int64)
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(2, 5)):
        cls = int(rng.integers(1, k))
        cy, cx = rng.uniform(0.15, 0.85, 2) * size
        r = rng.uniform(0.12, 0.25) * size
        kind = (cls - 1) % 3
        if kind == 0:
            region = (np.abs(yy - cy) <= r * 0.8) & (np.abs(xx - cx) <= r)
        elif kind == 1:
            region = (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
        else:
            region = (np.abs(yy - cy) + np.abs(xx - cx)) <= r * 1.2
        lab[region] = cls
    return lab


def _texture(kind: str, rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "stripes":
        base = np.sin(2 * np.pi * yy / 4.0 + rng.uniform(0, 2 * np.pi))
    else:
        base = np.sign(np.sin(np.pi * yy / 2.0 + 0.5) * np.sin(np.pi * xx / 2.0 + 0.5))
    return 0.07 * base + 0.03 * rng.standard_normal((size, size))


def _render(lab: np.ndarray, palette: np.ndarray, texture: np.ndarray) -> np.ndarray:
    img = palette[lab].transpose(2, 0, 1) + texture[None]
    return img


def synth_two_domain(seed: int, n: int, size: int = 32, k: int = 3) -> tuple[list[SegSample], list[SegSample]]:
    """Paired synthetic datasets sharing geometry.

    Domain A uses the base palette with horizontal-stripe texture.  Domain B
    renders the same label maps with a checkerboard texture and then applies
    a global per-channel gain/offset, giving a style-type domain gap.
    """
    if k < 2:
        raise ConfigurationError("synthetic scenes need at least 2 classes")
    rng = np.random.default_rng(seed)
    pal = _palette(k)
    a, b = [], []
    for i in range(n):
        lab = _scene_labels(rng, size, k)
        ia = np.clip(_render(lab, pal, _texture("stripes", rng, size)), 0, 1)
        ib = _render(lab, pal, _texture("checker", rng, size))
        ib = np.clip(ib * DOMAIN_B_GAIN[:, None, None] + DOMAIN_B_OFFSET[:, None, None], 0, 1)
        a.append(SegSample(ia.astype(np.float32), lab.copy(), "A", f"synthA/{i:05d}"))
        b.append(SegSample(ib.astype(np.float32), lab.copy(), "B", f"synthB/{i:05d}"))
    return a, b


def synth_style_corpus(seed: int, n: int, size: int = 32, k: int = 3) -> list[np.ndarray]:
    """Images with broadly varying global channel statistics, standing in for a
    large external style corpus."""
    rng = np.random.default_rng(seed)
    pal = _palette(k)
    out = []
    for _ in range(n):
        lab = _scene_labels(rng, size, k)
        img = _render(lab, pal, _texture(rng.choice(["stripes", "checker"]), rng, size))
        gain = rng.uniform(0.6, 1.4, 3)
        offset = rng.uniform(-0.4, 0.4, 3)
        out.append(np.clip(img * gain[:, None, None] + offset[:, None, None], 0, 1).astype(np.float32))
    return out
