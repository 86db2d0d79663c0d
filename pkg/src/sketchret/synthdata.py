"""Procedural paired-modality corpus: colored photo renders and line-sketch
renders of the same shape genotypes.

Identities are shape genotypes. Binary attributes are deterministic functions
of the genotype and never depend on the color palette. Photos are filled,
noisy, color rasters; sketches are thin wobbly strokes of the same silhouette,
so the two modalities share semantics but not pixel statistics.
"""

from __future__ import annotations

import hashlib
import json
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import AuditViolation, ConfigurationError, CorpusError

Array = np.ndarray

MANIFEST_FORMAT = "sketchret-corpus/1"
MANIFEST_NAME = "manifest.json"

ATTRIBUTE_NAMES = ["hat", "wide", "many_parts", "tall", "handle", "skewed",
                   "dotted", "dark_fill"]

PALETTES = [
    ("red", (0.85, 0.20, 0.20)),
    ("orange", (0.90, 0.55, 0.15)),
    ("yellow", (0.85, 0.80, 0.20)),
    ("green", (0.20, 0.70, 0.30)),
    ("blue", (0.20, 0.40, 0.85)),
    ("purple", (0.60, 0.25, 0.75)),
]

# color-derived poison bits: palette index sets
COLOR_BITS = [("color_warm", {0, 1, 2}), ("color_green", {3}), ("color_cool", {4, 5})]

_SS = 2  # supersampling factor for antialiased rasters


# ---------------------------------------------------------------------------
# genotypes and attributes


@dataclass
class Genotype:
    body_a: float
    body_b: float
    power: float
    skew: float
    n_bumps: int
    bump_r: float
    has_hat: bool
    has_handle: bool
    dot_density: float
    fill_level: float
    palette_idx: int

    def attributes(self) -> list[int]:
        return [
            int(self.has_hat),
            int(self.body_a > 0.29),
            int(self.n_bumps >= 3),
            int(self.body_b > 1.12 * self.body_a),
            int(self.has_handle),
            int(abs(self.skew) > 0.17),
            int(self.dot_density > 0),
            int(self.fill_level < 0.55),
        ]


def sample_genotype(rng: np.random.Generator) -> Genotype:
    return Genotype(
        body_a=rng.uniform(0.18, 0.40),
        body_b=rng.uniform(0.18, 0.40),
        power=rng.uniform(1.6, 5.0),
        skew=rng.uniform(-0.35, 0.35),
        n_bumps=int(rng.integers(0, 6)),
        bump_r=rng.uniform(0.05, 0.09),
        has_hat=bool(rng.random() < 0.5),
        has_handle=bool(rng.random() < 0.5),
        dot_density=float(rng.uniform(0.10, 0.25)) if rng.random() < 0.5 else 0.0,
        fill_level=rng.uniform(0.30, 0.95),
        palette_idx=int(rng.integers(0, len(PALETTES))),
    )


# ---------------------------------------------------------------------------
# rasterization


def _shape_masks(g: Genotype, size: int, rng: np.random.Generator, wobble: float,
                 shift: tuple[float, float], scale: float):
    """Body/detail masks on a supersampled grid. wobble > 0 modulates the
    body boundary like an unsteady hand."""
    n = size * _SS
    ys, xs = np.mgrid[0:n, 0:n]
    x = (xs + 0.5) / n
    y = (ys + 0.5) / n
    cx, cy = 0.5 + shift[0], 0.54 + shift[1]
    a = g.body_a * scale
    b = g.body_b * scale
    xsh = x + g.skew * (y - cy)
    fx = (xsh - cx) / a
    fy = (y - cy) / b
    f = np.abs(fx) ** g.power + np.abs(fy) ** g.power
    thr = 1.0
    if wobble > 0:
        theta = np.arctan2(fy, fx)
        phase = rng.uniform(0, 2 * np.pi)
        thr = 1.0 + wobble * np.sin(5 * theta + phase) + 0.5 * wobble * np.sin(9 * theta - phase)
    body = f <= thr

    top_y = cy - b
    if g.n_bumps > 0:
        pos = np.linspace(-0.6, 0.6, g.n_bumps) * a
        for px in pos:
            bx = cx + px - g.skew * b
            r = g.bump_r * scale
            body |= (x - bx) ** 2 + (y - top_y) ** 2 <= r ** 2

    if g.has_hat:
        hat_h = 0.16 * scale
        apex_y = top_y - hat_h
        base_y = top_y + 0.02
        hx = cx - g.skew * (b + 0.5 * hat_h)
        frac = np.clip((y - apex_y) / (base_y - apex_y), 0.0, 1.0)
        body |= (y >= apex_y) & (y <= base_y) & (np.abs(x - hx) <= 0.13 * scale * frac)

    ring = np.zeros_like(body)
    if g.has_handle:
        hx = cx + a + 0.055 * scale
        hy = cy
        rr = (x - hx) ** 2 + (y - hy) ** 2
        ring = (rr <= (0.085 * scale) ** 2) & (rr >= (0.045 * scale) ** 2)
    return body, ring, (cx, cy)


def _erode4(m: Array) -> Array:
    out = m.copy()
    out[1:, :] &= m[:-1, :]
    out[:-1, :] &= m[1:, :]
    out[:, 1:] &= m[:, :-1]
    out[:, :-1] &= m[:, 1:]
    return out


def _dilate8(m: Array) -> Array:
    out = m.copy()
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            out |= np.roll(np.roll(m, dy, axis=0), dx, axis=1)
    return out


def _downsample(img: Array) -> Array:
    if img.ndim == 2:
        return 0.25 * (img[0::2, 0::2] + img[0::2, 1::2] + img[1::2, 0::2] + img[1::2, 1::2])
    return 0.25 * (img[0::2, 0::2, :] + img[0::2, 1::2, :] + img[1::2, 0::2, :] + img[1::2, 1::2, :])


def render_photo(g: Genotype, size: int, rng: np.random.Generator,
                 style: str = "source") -> Array:
    """Filled color raster with background clutter and illumination jitter.
    Returns uint8 (size, size, 3)."""
    shift = (rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02))
    scale = rng.uniform(0.96, 1.04)
    body, ring, (cx, cy) = _shape_masks(g, size, rng, wobble=0.0, shift=shift, scale=scale)
    mask = body | ring
    n = size * _SS
    ys = (np.mgrid[0:n, 0:n][0] + 0.5) / n

    bg_base = 0.62 if style == "source" else 0.52
    grad = rng.uniform(-0.10, 0.10) * (ys - 0.5)
    img = np.zeros((n, n, 3))
    img[...] = (bg_base + grad)[..., None]
    img += rng.normal(0.0, 0.025 if style == "source" else 0.04, size=(n, n, 1))

    color = np.array(PALETTES[g.palette_idx][1])
    shade = 1.0 + 0.25 * (ys - cy) / max(g.body_b, 1e-6)
    fill = g.fill_level * color[None, None, :] * shade[..., None]
    img[mask] = fill[mask]
    if g.dot_density > 0:
        dots = (rng.random((n, n)) < g.dot_density) & body
        img[dots] *= 0.35
    img *= rng.uniform(0.94, 1.06)
    img += rng.normal(0.0, 0.015, size=(n, n, 3))
    img = _downsample(np.clip(img, 0.0, 1.0))
    return np.round(img * 255.0).astype(np.uint8)


def render_sketch(g: Genotype, size: int, rng: np.random.Generator) -> Array:
    """Thin-stroke edge drawing of the same genotype with hand wobble and
    stroke dropout. Returns uint8 (size, size) grayscale."""
    shift = (rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02))
    scale = rng.uniform(0.96, 1.04)
    body, ring, (cx, cy) = _shape_masks(g, size, rng, wobble=0.04, shift=shift, scale=scale)
    edge = (body & ~_erode4(body)) | ring
    n = size * _SS

    ndrop = int(rng.integers(0, 2))
    if ndrop > 0:
        ys, xs = np.mgrid[0:n, 0:n]
        theta = np.arctan2((ys + 0.5) / n - cy, (xs + 0.5) / n - cx)
        for _ in range(ndrop):
            t0 = rng.uniform(-np.pi, np.pi)
            width = rng.uniform(0.25, 0.5)
            dd = np.mod(theta - t0 + np.pi, 2 * np.pi) - np.pi
            edge &= ~(np.abs(dd) < width / 2)

    edge = _dilate8(edge)
    img = np.full((n, n), 0.96) + rng.normal(0.0, 0.012, size=(n, n))
    img[edge] = 0.12 + rng.normal(0.0, 0.04, size=int(edge.sum()))
    img = _downsample(np.clip(img, 0.0, 1.0))
    return np.round(img * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# portable raster IO (binary PPM/PGM)


def write_raster(path: Path, img: Array) -> None:
    if img.ndim == 3:
        header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n"
    else:
        header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(img.astype(np.uint8).tobytes())


def read_raster(path: Path) -> Array:
    """Read a PPM/PGM written by write_raster as float64 (H, W, 3) in [0, 1];
    grayscale is replicated across channels."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        dims = fh.readline().split()
        maxval = fh.readline().strip()
        w, h = int(dims[0]), int(dims[1])
        if maxval != b"255":
            raise CorpusError(f"{path}: unsupported raster depth {maxval!r}")
        data = fh.read()
    if magic == b"P6":
        img = np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)
    elif magic == b"P5":
        img = np.frombuffer(data, dtype=np.uint8).reshape(h, w)
        img = np.repeat(img[:, :, None], 3, axis=2)
    else:
        raise CorpusError(f"{path}: not a binary PPM/PGM file")
    return img.astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# manifest


def manifest_to_text(manifest: dict) -> str:
    return json.dumps(manifest, sort_keys=True, indent=1) + "\n"


def save_manifest(manifest: dict, path: Path) -> None:
    Path(path).write_text(manifest_to_text(manifest), encoding="utf-8")


def load_manifest(path: Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# generation


def generate_corpus(out_dir, seed: int = 0, n_source_ids: int = 200,
                    n_target_train_ids: int = 40, n_target_test_ids: int = 20,
                    photos_per_source_id: int = 4, photos_per_target_id: int = 2,
                    sketches_per_target_id: int = 1, image_size: int = 32) -> Path:
    """Render the three splits to disk and write the manifest. Deterministic
    in all arguments. Returns the manifest path."""
    if n_source_ids < 10:
        raise ConfigurationError("n_source_ids must be >= 10")
    if n_target_train_ids < 4 or n_target_test_ids < 4:
        raise ConfigurationError("target splits need >= 4 identities each")
    if image_size < 16 or image_size % 2:
        raise ConfigurationError(
            f"image_size {image_size} too small to render shape parts (need even, >= 16)")

    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    ss = np.random.SeedSequence(seed)
    src_ss, tr_ss, te_ss = ss.spawn(3)

    def make_genotypes(seq, count):
        return [sample_genotype(np.random.default_rng(child)) for child in seq.spawn(count)]

    src_geno = make_genotypes(src_ss, n_source_ids)
    coverage = np.array([g.attributes() for g in src_geno])
    missing = [ATTRIBUTE_NAMES[i] for i in range(len(ATTRIBUTE_NAMES))
               if coverage[:, i].min() == coverage[:, i].max()]
    if missing:
        raise ConfigurationError(
            f"seed {seed} gives single-valued source attributes {missing}; pick another seed")
    tr_geno = make_genotypes(tr_ss, n_target_train_ids)
    te_geno = make_genotypes(te_ss, n_target_test_ids)

    samples = {"source": [], "target_train": [], "target_test": []}
    checksums = {}

    def emit(split, identity, g, domain, idx, rng, style):
        folder = root / split / str(identity)
        folder.mkdir(parents=True, exist_ok=True)
        if domain == "t2":
            img = render_sketch(g, image_size, rng)
            rel = f"{split}/{identity}/{domain}_{idx}.pgm"
        else:
            img = render_photo(g, image_size, rng, style=style)
            rel = f"{split}/{identity}/{domain}_{idx}.ppm"
        write_raster(root / rel, img)
        rec = {"path": rel, "identity": identity, "domain": domain}
        if split == "source":
            rec["attributes"] = g.attributes()
            rec["palette"] = g.palette_idx
        samples[split].append(rec)
        checksums[rel] = _sha256(root / rel)

    for i, (g, child) in enumerate(zip(src_geno, src_ss.spawn(n_source_ids))):
        streams = child.spawn(photos_per_source_id + 1)[1:]
        for k, st in enumerate(streams):
            emit("source", i, g, "s", k, np.random.default_rng(st), "source")

    def emit_target(split, geno, seq, base_id):
        for i, (g, child) in enumerate(zip(geno, seq.spawn(len(geno)))):
            identity = base_id + i
            streams = child.spawn(photos_per_target_id + sketches_per_target_id + 1)[1:]
            for k in range(photos_per_target_id):
                emit(split, identity, g, "t1", k, np.random.default_rng(streams[k]), "target")
            for k in range(sketches_per_target_id):
                emit(split, identity, g, "t2", k,
                     np.random.default_rng(streams[photos_per_target_id + k]), "target")

    emit_target("target_train", tr_geno, tr_ss, 1000)
    emit_target("target_test", te_geno, te_ss, 2000)

    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": seed,
        "image_size": image_size,
        "attribute_names": list(ATTRIBUTE_NAMES),
        "attribute_is_color": [False] * len(ATTRIBUTE_NAMES),
        "n_source_ids": n_source_ids,
        "n_target_train_ids": n_target_train_ids,
        "n_target_test_ids": n_target_test_ids,
        "samples": samples,
        "checksums": checksums,
    }
    path = root / MANIFEST_NAME
    save_manifest(manifest, path)
    return path


def poison_with_color_attributes(manifest: dict) -> dict:
    """Append palette-derived bits to the shared attribute space. Sketches
    carry no color, so these bits break modality invariance on purpose."""
    out = json.loads(json.dumps(manifest))
    out["attribute_names"] = list(manifest["attribute_names"]) + [n for n, _ in COLOR_BITS]
    out["attribute_is_color"] = list(manifest["attribute_is_color"]) + [True] * len(COLOR_BITS)
    for rec in out["samples"]["source"]:
        pal = rec["palette"]
        rec["attributes"] = list(rec["attributes"]) + [int(pal in ids) for _, ids in COLOR_BITS]
    return out


# ---------------------------------------------------------------------------
# loading + access audit


class AccessAudit:
    """Records every sample access by split; raises inside a guard that
    forbids the split."""

    def __init__(self):
        self.events: list[tuple[str | None, str, str]] = []
        self._context: str | None = None
        self._forbidden: frozenset = frozenset()

    @contextmanager
    def guard(self, context: str, forbidden):
        prev = (self._context, self._forbidden)
        self._context, self._forbidden = context, frozenset(forbidden)
        try:
            yield self
        finally:
            self._context, self._forbidden = prev

    def record(self, split: str, path: str) -> None:
        if split in self._forbidden:
            raise AuditViolation(
                f"split {split!r} was read during {self._context!r} (path {path})")
        self.events.append((self._context, split, path))

    def count(self, split: str, context: str | None = "any") -> int:
        return sum(1 for c, s, _ in self.events
                   if s == split and (context == "any" or c == context))


class Split:
    """One corpus split; image reads go through the corpus access audit."""

    def __init__(self, corpus: "Corpus", name: str, records: list[dict], label_space: str):
        self.corpus = corpus
        self.name = name
        self.records = records
        self.label_space = label_space

    def __len__(self):
        return len(self.records)

    @property
    def identities(self) -> list[int]:
        return sorted({r["identity"] for r in self.records})

    def indices_for(self, domain: str | None = None, identities=None) -> list[int]:
        keep = set(identities) if identities is not None else None
        return [i for i, r in enumerate(self.records)
                if (domain is None or r["domain"] == domain)
                and (keep is None or r["identity"] in keep)]

    def image(self, i: int) -> Array:
        return self.corpus.read_image(self.name, self.records[i]["path"])

    def images(self, indices) -> Array:
        return np.stack([self.image(i) for i in indices])

    def labels(self, indices) -> Array:
        return np.array([self.records[i]["identity"] for i in indices])

    def attributes(self, indices) -> Array:
        rows = []
        for i in indices:
            att = self.records[i].get("attributes")
            if att is None:
                raise ConfigurationError(f"split {self.name} has no attribute labels")
            rows.append(att)
        return np.array(rows, dtype=float)

    def restrict_identities(self, identities) -> "Split":
        keep = set(identities)
        recs = [r for r in self.records if r["identity"] in keep]
        return Split(self.corpus, self.name, recs, self.label_space)


class Corpus:
    def __init__(self, root: Path, manifest: dict):
        self.root = Path(root)
        self.manifest = manifest
        self.audit = AccessAudit()
        self._cache: dict[str, Array] = {}
        self.splits = {
            "source": Split(self, "source", manifest["samples"]["source"], "source-ids"),
            "target_train": Split(self, "target_train", manifest["samples"]["target_train"],
                                  "target-ids"),
            "target_test": Split(self, "target_test", manifest["samples"]["target_test"],
                                 "target-ids"),
        }

    @property
    def image_size(self) -> int:
        return self.manifest["image_size"]

    @property
    def attribute_names(self) -> list[str]:
        return self.manifest["attribute_names"]

    @property
    def n_attributes(self) -> int:
        return len(self.manifest["attribute_names"])

    def read_image(self, split: str, rel_path: str) -> Array:
        self.audit.record(split, rel_path)
        if rel_path not in self._cache:
            self._cache[rel_path] = read_raster(self.root / rel_path)
        return self._cache[rel_path]


def load_corpus(manifest_path, verify_checksums: bool = True) -> Corpus:
    path = Path(manifest_path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise CorpusError(f"manifest not found: {path}")
    manifest = load_manifest(path)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise CorpusError(f"unknown manifest format {manifest.get('format')!r}")
    root = path.parent
    if verify_checksums:
        for rel, want in manifest["checksums"].items():
            f = root / rel
            if not f.exists():
                raise CorpusError(f"missing corpus file {rel}")
            got = _sha256(f)
            if got != want:
                raise CorpusError(f"checksum mismatch for {rel}: {got} != {want}")
    return Corpus(root, manifest)


def corpus_from_manifest(manifest: dict, root) -> Corpus:
    """Corpus over an in-memory manifest variant (e.g. color-poisoned)."""
    return Corpus(Path(root), manifest)
