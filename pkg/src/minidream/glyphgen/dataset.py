"""Dataset items, quality filtering, cluster-balanced sampling and manifests."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from sklearn.cluster import KMeans

from .atlas import GlyphAtlas
from .caption import Caption, make_captions
from .render import (ANCHORS, PALETTE, RenderSpec, SpecError, aesthetic_tags_for, anchor_position,
                     luminance, render_text_image)

log = logging.getLogger(__name__)

# minimum fg/bg luminance gap for generated specs; keeps every render legible
MIN_LUMA_GAP = 0.3


@dataclass(frozen=True)
class DatasetItem:
    image: np.ndarray
    spec: RenderSpec
    caption: Caption
    path: str = ""
    cluster_id: int = -1
    quality: float = float("nan")

    @property
    def content_hash(self) -> str:
        return content_hash(self.image)


@dataclass(frozen=True)
class DatasetManifest:
    items: tuple[DatasetItem, ...]
    seed: int
    split: str = "train"

    def __len__(self) -> int:
        return len(self.items)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def content_hash(image: np.ndarray) -> str:
    arr = to_uint8(image)
    h = hashlib.sha256(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def save_png(image: np.ndarray, path: str | Path) -> None:
    arr = to_uint8(image)
    Image.fromarray(np.ascontiguousarray(arr.transpose(1, 2, 0)), mode="RGB").save(path, format="PNG")


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def luma(image: np.ndarray) -> np.ndarray:
    return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]


def quality_components(image: np.ndarray) -> tuple[float, float]:
    """(contrast, sharpness): std of luminance and mean |4-neighbour Laplacian|."""
    y = luma(np.asarray(image, dtype=np.float64))
    padded = np.pad(y, 1, mode="edge")
    lap = (padded[:-2, 1:-1] + padded[2:, 1:-1] + padded[1:-1, :-2] + padded[1:-1, 2:] - 4 * y)
    return float(y.std()), float(np.abs(lap).mean())


def quality_score(image: np.ndarray) -> float:
    contrast, sharpness = quality_components(image)
    return contrast + sharpness


def dedup_filter(items, quality_threshold: float = 0.0) -> list[DatasetItem]:
    """Drop repeated images (first copy wins) and items scoring below the threshold."""
    seen: set[str] = set()
    out = []
    dropped = 0
    for item in items:
        h = item.content_hash
        if h in seen:
            dropped += 1
            continue
        seen.add(h)
        q = quality_score(item.image)
        if q < quality_threshold:
            dropped += 1
            continue
        out.append(replace(item, quality=q))
    if dropped:
        log.warning("dedup_filter dropped %d of %d items", dropped, dropped + len(out))
    if not out:
        log.warning("dedup_filter produced an empty result")
    return out


def cluster_features(image: np.ndarray, grid: int = 4) -> np.ndarray:
    """Mean colour plus a grid histogram of foreground (non-background) density."""
    img = np.asarray(image, dtype=np.float64)
    bg = np.median(img.reshape(3, -1), axis=1)
    fg = np.linalg.norm(img - bg[:, None, None], axis=0) > 0.25
    h, w = fg.shape
    dens = fg[: h - h % grid, : w - w % grid].reshape(grid, h // grid, grid, w // grid).mean(axis=(1, 3))
    return np.concatenate([img.mean(axis=(1, 2)), dens.ravel()])


def cluster_sample(items, k: int, per_cluster_quota: int, seed: int) -> DatasetManifest:
    """k-means over cluster_features, then round-robin draws up to the quota per cluster.

    Cluster ids are renumbered by first appearance so k=1 always yields id 0.
    """
    items = list(items)
    if not items:
        raise ValueError("cluster_sample needs at least one item")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, len(items))
    feats = np.stack([cluster_features(it.image) for it in items])
    if k == 1:
        raw = np.zeros(len(items), dtype=int)
    else:
        raw = KMeans(n_clusters=k, n_init=4, random_state=seed).fit_predict(feats)
    relabel: dict[int, int] = {}
    for lab in raw:
        relabel.setdefault(int(lab), len(relabel))
    labels = [relabel[int(lab)] for lab in raw]

    queues: dict[int, list[int]] = {}
    for idx, lab in enumerate(labels):
        queues.setdefault(lab, []).append(idx)
    picked = []
    taken = {lab: 0 for lab in queues}
    while True:
        progressed = False
        for lab in sorted(queues):
            if taken[lab] < per_cluster_quota and taken[lab] < len(queues[lab]):
                picked.append(queues[lab][taken[lab]])
                taken[lab] += 1
                progressed = True
        if not progressed:
            break
    chosen = tuple(replace(items[i], cluster_id=labels[i]) for i in picked)
    return DatasetManifest(chosen, seed)


def random_spec(rng: np.random.Generator, texts_from: list[str], image_size: int,
                max_chars: int = 2, scale: int = 1) -> RenderSpec:
    names = list(PALETTE)
    while True:
        fg, bg = rng.choice(len(names), size=2, replace=False)
        fgc, bgc = PALETTE[names[fg]], PALETTE[names[bg]]
        if abs(luminance(fgc) - luminance(bgc)) >= MIN_LUMA_GAP:
            break
    n = int(rng.integers(1, max_chars + 1))
    text = "".join(texts_from[int(i)] for i in rng.integers(0, len(texts_from), size=n))
    anchor = ANCHORS[int(rng.integers(0, len(ANCHORS)))]
    pos = anchor_position(anchor, n, scale, image_size)
    spec = RenderSpec(text, fgc, bgc, pos, scale)
    return replace(spec, aesthetic_tags=aesthetic_tags_for(spec, image_size))


def make_item(spec: RenderSpec, atlas: GlyphAtlas, image_size: int, path: str = "") -> DatasetItem:
    image = render_text_image(spec, atlas, image_size)
    return DatasetItem(image, spec, make_captions(spec, image_size), path)


def generate_items(n: int, latin: GlyphAtlas, cjk: GlyphAtlas, seed: int, image_size: int = 16,
                   max_chars: int = 2, cjk_fraction: float = 0.5) -> list[DatasetItem]:
    """Draw ``n`` random specs (alternating scripts by ``cjk_fraction``) and render them."""
    from .atlas import merge_atlases

    rng = np.random.default_rng([seed, 7])
    both = merge_atlases(latin, cjk)
    out = []
    while len(out) < n:
        source = cjk if rng.random() < cjk_fraction else latin
        try:
            spec = random_spec(rng, source.codepoints, image_size, max_chars)
        except SpecError:
            continue
        out.append(make_item(spec, both, image_size))
    return out


# ---------------------------------------------------------------------------
# manifest persistence (JSON lines, one item per line)

def item_record(item: DatasetItem) -> dict:
    return {
        "image": item.path,
        "spec": item.spec.to_dict(),
        "caption": {"short": item.caption.short, "long": item.caption.long,
                    "textual": item.caption.textual, "language": item.caption.language},
        "cluster_id": item.cluster_id,
        "quality": round(float(item.quality), 8),
    }


def write_manifest(manifest: DatasetManifest, root: str | Path, image_dir: str = "images") -> Path:
    """Write PNGs under ``root/image_dir`` and ``root/manifest.jsonl``; returns the manifest path."""
    root = Path(root)
    (root / image_dir).mkdir(parents=True, exist_ok=True)
    lines = []
    for i, item in enumerate(manifest.items):
        rel = f"{image_dir}/{i:05d}.png"
        save_png(item.image, root / rel)
        lines.append(json.dumps(item_record(replace(item, path=rel)), ensure_ascii=False, sort_keys=True))
    header = json.dumps({"seed": manifest.seed, "split": manifest.split, "count": len(lines)}, sort_keys=True)
    path = root / "manifest.jsonl"
    path.write_text("\n".join([header, *lines]) + "\n", encoding="utf-8")
    return path


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    items = []
    for line in lines[1:]:
        rec = json.loads(line)
        cap = rec["caption"]
        items.append(DatasetItem(
            image=load_png(path.parent / rec["image"]),
            spec=RenderSpec.from_dict(rec["spec"]),
            caption=Caption(cap["short"], cap["long"], cap["textual"], cap["language"]),
            path=rec["image"],
            cluster_id=int(rec["cluster_id"]),
            quality=float(rec["quality"]),
        ))
    return DatasetManifest(tuple(items), int(header["seed"]), header.get("split", "train"))
