"""Procedural paired images, PPM I/O and dataset manifests.

Each pair shows one random convex polygon (3-6 vertices) or ellipse.  The
source is a thin black outline on white; the target is the same shape filled
with a colour whose hue is a function of the vertex count and the area, so the
source fully determines the target.  Pixel values live in [-1, 1].
"""

import colorsys
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FileError, ParameterError, ParseError, VersionError
from .rng import Rng

MANIFEST_VERSION = "1"
OUTLINE_HALF_WIDTH = 0.6


@dataclass
class Shape:
    kind: str                 # "polygon" or "ellipse"
    n_vertices: int           # 0 for an ellipse
    center: tuple
    params: dict = field(default_factory=dict)
    area: float = 0.0

    def signed_distance(self, px, py):
        """Approximate signed distance (negative inside) at pixel centres."""
        cx, cy = self.center
        if self.kind == "ellipse":
            a, b, th = self.params["a"], self.params["b"], self.params["theta"]
            c, s = np.cos(th), np.sin(th)
            u = (px - cx) * c + (py - cy) * s
            v = -(px - cx) * s + (py - cy) * c
            f = (u / a) ** 2 + (v / b) ** 2 - 1.0
            grad = 2.0 * np.sqrt((u / a ** 2) ** 2 + (v / b ** 2) ** 2)
            return f / np.maximum(grad, 1e-9)
        verts = self.params["vertices"]
        d = np.full(px.shape, -np.inf)
        n = len(verts)
        for i in range(n):
            x0, y0 = verts[i]
            x1, y1 = verts[(i + 1) % n]
            ex, ey = x1 - x0, y1 - y0
            length = np.hypot(ex, ey)
            nx, ny = ey / length, -ex / length  # outward for counter-clockwise order
            d = np.maximum(d, (px - x0) * nx + (py - y0) * ny)
        return d


@dataclass
class PairedSample:
    source: np.ndarray
    target: np.ndarray
    sample_id: int
    shape: Shape = None
    color: tuple = None


def _random_shape(rng, S):
    kind_draw = int(rng.integers(0, 5))
    radius = rng.uniform(None, 0.13 * S, 0.27 * S)
    margin = radius + 2.0
    cx = rng.uniform(None, margin, S - margin)
    cy = rng.uniform(None, margin, S - margin)
    if kind_draw == 4:
        a = radius
        b = radius * rng.uniform(None, 0.55, 1.0)
        theta = rng.uniform(None, 0.0, np.pi)
        return Shape("ellipse", 0, (cx, cy), {"a": a, "b": b, "theta": theta}, float(np.pi * a * b))
    k = kind_draw + 3
    # sorted angles with a minimum gap keep the polygon well-formed
    while True:
        angles = np.sort(rng.uniform((k,), 0.0, 2 * np.pi))
        gaps = np.diff(np.concatenate([angles, angles[:1] + 2 * np.pi]))
        if gaps.min() > 0.5 and gaps.max() < np.pi * 0.95:
            break
    verts = [(cx + radius * np.cos(t), cy + radius * np.sin(t)) for t in angles]
    xs = np.array([v[0] for v in verts])
    ys = np.array([v[1] for v in verts])
    area = 0.5 * abs(np.dot(xs, np.roll(ys, -1)) - np.dot(ys, np.roll(xs, -1)))
    return Shape("polygon", k, (cx, cy), {"vertices": verts}, float(area))


def shape_color(shape, S):
    """RGB in [0, 1]: hue from vertex count and normalised area."""
    code = {0: 0, 3: 1, 4: 2, 5: 3, 6: 4}[shape.n_vertices]
    area_frac = min(shape.area / (np.pi * (0.27 * S) ** 2), 1.0)
    hue = (code / 5.0 + 0.18 * area_frac) % 1.0
    return colorsys.hsv_to_rgb(hue, 0.85, 0.9)


def render(shape, S):
    """Return (source, target, fill_mask, outline_darkness)."""
    py, px = np.mgrid[0:S, 0:S].astype(np.float64) + 0.5
    d = shape.signed_distance(px, py)
    dark = np.clip(1.0 - np.abs(d) / OUTLINE_HALF_WIDTH, 0.0, 1.0)
    cover = np.clip(0.5 - d, 0.0, 1.0)
    gray = 1.0 - 2.0 * dark
    source = np.stack([gray, gray, gray])
    rgb = np.asarray(shape_color(shape, S)).reshape(3, 1, 1) * 2.0 - 1.0
    target = (1.0 - cover) * 1.0 + cover * rgb
    return source, target, d < 0, dark


def generate_pair(seed, sample_id, S=32):
    if S < 16:
        raise ParameterError(f"image size must be >= 16, got {S}")
    rng = Rng(seed).split("pair").split(int(sample_id))
    shape = _random_shape(rng, S)
    source, target, _, _ = render(shape, S)
    return PairedSample(source, target, int(sample_id), shape, shape_color(shape, S))


# ---------------------------------------------------------------- PPM

def encode_ppm(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ParameterError(f"expected a (3, H, W) image, got {img.shape}")
    _, H, W = img.shape
    q = np.clip(np.rint((img + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return f"P6\n{W} {H}\n255\n".encode("ascii") + q.transpose(1, 2, 0).tobytes()


def _read_token(buf, pos):
    while True:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        break
    start = pos
    while pos < len(buf) and not buf[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ParseError("unexpected end of PPM header", start)
    return buf[start:pos], start, pos


def decode_ppm(buf):
    if buf[:2] != b"P6":
        raise ParseError("not a binary PPM (missing P6 magic)", 0)
    pos = 2
    vals = []
    for _ in range(3):
        tok, start, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise ParseError(f"bad PPM header field {tok!r}", start)
        vals.append(int(tok))
    W, H, maxval = vals
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}", pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ParseError("missing whitespace after PPM header", pos)
    pos += 1
    need = W * H * 3
    if len(buf) - pos < need:
        raise ParseError(f"truncated pixel data: need {need} bytes, have {len(buf) - pos}", len(buf))
    q = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(H, W, 3)
    return q.transpose(2, 0, 1).astype(np.float64) / 127.5 - 1.0


def write_image(path, img):
    try:
        Path(path).write_bytes(encode_ppm(img))
    except OSError as exc:
        raise FileError(f"cannot write image {path}: {exc}") from exc


def read_image(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FileError(f"cannot read image {path}: {exc}") from exc
    try:
        return decode_ppm(buf)
    except ParseError as exc:
        raise ParseError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------- manifests

@dataclass
class DatasetManifest:
    seed: int
    image_size: int
    split: str
    entries: list          # (sample_id, source_path, target_path), paths relative to root
    version: str = MANIFEST_VERSION
    root: Path = None

    @property
    def count(self):
        return len(self.entries)

    def serialize(self):
        lines = [f"version\t{self.version}", f"seed\t{self.seed}", f"size\t{self.image_size}",
                 f"count\t{self.count}", f"split\t{self.split}"]
        lines += [f"{i}\t{s}\t{t}" for i, s, t in self.entries]
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text, root=None):
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        header = {}
        keys = ("version", "seed", "size", "count", "split")
        offset = 0
        for key, line in zip(keys, lines):
            parts = line.split("\t")
            if len(parts) != 2 or parts[0] != key:
                raise ParseError(f"expected header line '{key}', got {line!r}", offset)
            header[key] = parts[1]
            offset += len(line.encode("utf-8")) + 1
        if len(header) != len(keys):
            raise ParseError("manifest header incomplete", offset)
        entries = []
        for line in lines[len(keys):]:
            parts = line.split("\t")
            if len(parts) != 3 or not parts[0].lstrip("-").isdigit():
                raise ParseError(f"bad manifest entry {line!r}", offset)
            entries.append((int(parts[0]), parts[1], parts[2]))
            offset += len(line.encode("utf-8")) + 1
        if header["version"] != MANIFEST_VERSION:
            raise VersionError(f"unsupported manifest version {header['version']!r}")
        if int(header["count"]) != len(entries):
            raise ParseError(f"count {header['count']} != {len(entries)} entries", offset)
        if header["split"] not in ("train", "test"):
            raise ParseError(f"unknown split {header['split']!r}", 0)
        return cls(seed=int(header["seed"]), image_size=int(header["size"]), split=header["split"],
                   entries=entries, version=header["version"], root=Path(root) if root else None)

    def save(self, path):
        try:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(self.serialize())
        except OSError as exc:
            raise FileError(f"cannot write manifest {path}: {exc}") from exc

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise FileError(f"cannot read manifest {path}: {exc}") from exc
        return cls.parse(text, root=Path(path).parent)

    def resolve(self, rel):
        return (self.root / rel) if self.root is not None else Path(rel)

    def load_arrays(self):
        """Stacked (sources, targets, ids) from the referenced image files."""
        src = np.stack([read_image(self.resolve(s)) for _, s, _ in self.entries])
        tgt = np.stack([read_image(self.resolve(t)) for _, _, t in self.entries])
        ids = np.array([i for i, _, _ in self.entries], dtype=np.int64)
        return src, tgt, ids


def generate_dataset(seed, n_train, n_test, S, out_dir):
    """Write train/test images and manifests under ``out_dir``.

    Train ids are ``0..n_train-1`` and test ids follow on, so the ranges are
    disjoint.  Returns ``(train_manifest, test_manifest)``.
    """
    out = Path(out_dir)
    manifests = []
    for split, ids in (("train", range(n_train)), ("test", range(n_train, n_train + n_test))):
        folder = out / split
        try:
            os.makedirs(folder, exist_ok=True)
        except OSError as exc:
            raise FileError(f"cannot create {folder}: {exc}") from exc
        entries = []
        for i in ids:
            pair = generate_pair(seed, i, S)
            src_rel = f"{split}/{i:06d}_src.ppm"
            tgt_rel = f"{split}/{i:06d}_tgt.ppm"
            write_image(out / src_rel, pair.source)
            write_image(out / tgt_rel, pair.target)
            entries.append((i, src_rel, tgt_rel))
        m = DatasetManifest(seed=seed, image_size=S, split=split, entries=entries, root=out)
        m.save(out / f"{split}.manifest")
        manifests.append(m)
    return tuple(manifests)


def pairs_in_memory(seed, ids, S=32):
    """Stacked (sources, targets) generated directly, bypassing files."""
    pairs = [generate_pair(seed, i, S) for i in ids]
    return np.stack([p.source for p in pairs]), np.stack([p.target for p in pairs])


def nn_color_retrieval_accuracy(seed, n=64, S=32, noise=0.25, rng=None):
    """Dataset self-test: noisy copies of each source retrieve its target colour.

    Each query is a source plus Gaussian pixel noise; it is matched to the
    nearest clean source in pixel space and scored correct when that pair's
    fill colour equals the query's own.  High accuracy witnesses that the
    source determines the target.
    """
    rng = rng or Rng(seed).split("nn_witness")
    pairs = [generate_pair(seed, i, S) for i in range(n)]
    bank = np.stack([p.source.ravel() for p in pairs])
    correct = 0
    for k, p in enumerate(pairs):
        q = p.source.ravel() + noise * rng.normal(p.source.size)
        j = int(np.argmin(((bank - q) ** 2).sum(axis=1)))
        correct += np.allclose(pairs[j].color, p.color)
    return correct / n
