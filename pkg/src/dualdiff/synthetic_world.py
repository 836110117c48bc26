"""Procedural paired-modality world: scenes, renders, captions, QA, scoring.

A scene is one to three colored shapes, at most one per quadrant of a 16x16x3
grid in [-1, 1]. Rendering is deterministic; decoding a clean render recovers
the scene exactly, which makes the world its own ground-truth oracle for
scoring generated images and captions. Captions follow one fixed template in
fixed quadrant order, so every well-formed caption maps back to exactly one
scene.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, VocabError
from .text_diffusion import TokenSequence, Vocab

GRID_H = GRID_W = 16
GRID_C = 3
QUAD = 8  # quadrant edge
STENCIL = 6  # shape stencil edge, placed at offset 1 inside a quadrant

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow", "magenta", "cyan")
QUADRANTS = ("top-left", "top-right", "bottom-left", "bottom-right")
COUNTS = ("one", "two", "three")

# anchors are corners of the RGB cube: maximal pairwise separation keeps
# nearest-anchor decoding stable under generation noise
COLOR_ANCHORS = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
    "magenta": (1.0, -1.0, 1.0),
    "cyan": (-1.0, 1.0, 1.0),
}
BACKGROUND = (-1.0, -1.0, -1.0)

QUAD_OFFSETS = {
    "top-left": (0, 0),
    "top-right": (0, QUAD),
    "bottom-left": (QUAD, 0),
    "bottom-right": (QUAD, QUAD),
}

PAD, NULL = "<pad>", "<null>"
MASK = "<mask>"

WORDS = (
    PAD, NULL, "a",
    "red", "green", "blue", "yellow", "magenta", "cyan",
    "square", "circle", "triangle",
    "in", "the",
    "top-left", "top-right", "bottom-left", "bottom-right",
    "and",
    "color", "of", "shape",
    "how", "many", "objects",
    "one", "two", "three",
    "empty", "?", "what",
    MASK,
)
WORD_TO_ID = {w: i for i, w in enumerate(WORDS)}
VOCAB = Vocab(size=len(WORDS), mask_id=WORD_TO_ID[MASK])
PAD_ID = WORD_TO_ID[PAD]
NULL_ID = WORD_TO_ID[NULL]

TEXT_LEN = 20  # three-object caption is exactly 20 tokens

_OCCUPANCY_THRESHOLD = 0.12  # below this fraction a quadrant counts as empty
_DIST_THRESHOLD = 1.0  # pixel-to-background distance marking occupancy


def _stencils():
    sq = np.ones((STENCIL, STENCIL), bool)
    ii, jj = np.mgrid[0:STENCIL, 0:STENCIL]
    circ = (ii - 2.5) ** 2 + (jj - 2.5) ** 2 <= 6.5
    tri = np.abs(jj - 2.5) <= (ii // 2) + 0.5
    return {"square": sq, "circle": circ, "triangle": tri}


STENCILS = _stencils()


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    quadrant: str


@dataclass(frozen=True)
class Scene:
    """Objects in fixed quadrant order (TL, TR, BL, BR)."""

    objects: tuple

    def __post_init__(self):
        quads = [o.quadrant for o in self.objects]
        if len(set(quads)) != len(quads):
            raise ConfigError("at most one object per quadrant")
        order = [QUADRANTS.index(q) for q in quads]
        if order != sorted(order):
            raise ConfigError("objects must be listed in quadrant order")


def random_scene(rng):
    n = int(rng.integers(1, 4))
    quads = sorted(rng.choice(len(QUADRANTS), size=n, replace=False).tolist())
    colors = rng.choice(len(COLORS), size=n, replace=False).tolist()
    shapes = rng.integers(0, len(SHAPES), size=n).tolist()
    return Scene(
        tuple(
            SceneObject(SHAPES[s], COLORS[c], QUADRANTS[q])
            for q, c, s in zip(quads, colors, shapes)
        )
    )


def render(scene):
    """Exact grid for a scene; background everywhere else."""
    grid = np.empty((GRID_H, GRID_W, GRID_C))
    grid[:] = BACKGROUND
    for obj in scene.objects:
        r0, c0 = QUAD_OFFSETS[obj.quadrant]
        sten = STENCILS[obj.shape]
        block = grid[r0 + 1:r0 + 1 + STENCIL, c0 + 1:c0 + 1 + STENCIL]
        block[sten] = COLOR_ANCHORS[obj.color]
    return grid


# ---------------------------------------------------------------------------
# grid -> scene oracle
# ---------------------------------------------------------------------------


def decode_grid(grid):
    """Best-estimate scene from any grid, with per-field confidences.

    Per quadrant: pixels far from the background form an occupancy map; its
    mean color snaps to the nearest anchor and its pattern to the
    highest-correlation stencil. Returns (scene, details) where details maps
    quadrant -> dict(occupancy, color_conf, shape_conf) for occupied
    quadrants and dict(occupancy,) for empty ones.
    """
    grid = np.asarray(grid, dtype=np.float64)
    objects = []
    details = {}
    anchors = np.array([COLOR_ANCHORS[c] for c in COLORS])
    for quad in QUADRANTS:
        r0, c0 = QUAD_OFFSETS[quad]
        block = grid[r0:r0 + QUAD, c0:c0 + QUAD, :]
        dist = np.sqrt(((block - BACKGROUND) ** 2).sum(axis=-1))
        occupied = dist > _DIST_THRESHOLD
        occupancy = float(occupied.mean())
        if occupancy < _OCCUPANCY_THRESHOLD:
            details[quad] = {"occupancy": occupancy}
            continue

        mean_color = block[occupied].mean(axis=0)
        d = np.sqrt(((anchors - mean_color) ** 2).sum(axis=-1))
        order = np.argsort(d)
        color = COLORS[int(order[0])]
        color_conf = float(1.0 - d[order[0]] / max(d[order[1]], 1e-12))

        corrs = []
        occ_mass = occupied.sum()
        for shape in SHAPES:
            tmpl = np.zeros((QUAD, QUAD), bool)
            tmpl[1:1 + STENCIL, 1:1 + STENCIL] = STENCILS[shape]
            corrs.append((occupied & tmpl).sum() / np.sqrt(occ_mass * tmpl.sum()))
        corrs = np.array(corrs)
        best = int(corrs.argmax())
        second = float(np.partition(corrs, -2)[-2])
        shape = SHAPES[best]
        denom = max(1.0 - second, 1e-12)
        shape_conf = float(np.clip((corrs[best] - second) / denom, 0.0, 1.0))

        objects.append(SceneObject(shape, color, quad))
        details[quad] = {
            "occupancy": occupancy,
            "color_conf": max(0.0, color_conf),
            "shape_conf": shape_conf,
        }
    return Scene(tuple(objects)), details


# ---------------------------------------------------------------------------
# caption grammar
# ---------------------------------------------------------------------------


def tokenize(text):
    ids = []
    for word in text.split():
        if word not in WORD_TO_ID:
            raise VocabError(
                f"unknown word {word!r}; vocabulary: {' '.join(WORDS)}"
            )
        ids.append(WORD_TO_ID[word])
    return ids


def detokenize(ids, strip_pad=True):
    words = [WORDS[int(i)] for i in ids]
    if strip_pad:
        words = [w for w in words if w != PAD]
    return " ".join(words)


def pad_to_len(ids, length=TEXT_LEN):
    if len(ids) > length:
        raise VocabError(f"sequence of {len(ids)} tokens exceeds length {length}")
    return np.array(ids + [PAD_ID] * (length - len(ids)), dtype=np.int64)


def caption_text(scene):
    parts = []
    for i, obj in enumerate(scene.objects):
        lead = "a" if i == 0 else "and a"
        parts.append(f"{lead} {obj.color} {obj.shape} in the {obj.quadrant}")
    return " ".join(parts)


def caption_ids(scene, length=TEXT_LEN):
    return pad_to_len(tokenize(caption_text(scene)), length)


def parse_caption(ids):
    """Inverse of caption_ids on well-formed captions; None otherwise."""
    words = [WORDS[int(i)] for i in ids]
    while words and words[-1] == PAD:
        words.pop()
    objects = []
    i = 0
    first = True
    while i < len(words):
        want = ["a"] if first else ["and", "a"]
        if words[i:i + len(want)] != want:
            return None
        i += len(want)
        chunk = words[i:i + 5]
        if len(chunk) < 5:
            return None
        color, shape, in_, the, quad = chunk
        if color not in COLORS or shape not in SHAPES or in_ != "in" or the != "the" or quad not in QUADRANTS:
            return None
        objects.append(SceneObject(shape, color, quad))
        i += 5
        first = False
    if not objects or len(objects) > 3:
        return None
    try:
        return Scene(tuple(objects))
    except ConfigError:
        return None


def null_caption(length=TEXT_LEN):
    """The reserved empty-conditioning sequence, fully frozen."""
    ids = pad_to_len([NULL_ID], length)
    return TokenSequence(ids, np.ones(length, bool))


# ---------------------------------------------------------------------------
# question/answer pairs
# ---------------------------------------------------------------------------


def qa_pairs(scene, length=TEXT_LEN):
    """All well-posed single-token questions for a scene.

    Returns a list of (ids, question_len); ids hold question + answer +
    padding, the answer sitting at index question_len. Color questions are
    only asked for shapes appearing exactly once.
    """
    pairs = []

    def emit(question, answer):
        q = tokenize(question)
        ids = pad_to_len(q + tokenize(answer), length)
        pairs.append((ids, len(q)))

    shape_counts = {}
    for obj in scene.objects:
        shape_counts[obj.shape] = shape_counts.get(obj.shape, 0) + 1
    for obj in scene.objects:
        if shape_counts[obj.shape] == 1:
            emit(f"color of {obj.shape} ?", obj.color)
    by_quad = {o.quadrant: o for o in scene.objects}
    for quad in QUADRANTS:
        answer = by_quad[quad].shape if quad in by_quad else "empty"
        emit(f"shape in {quad} ?", answer)
    emit("how many objects ?", COUNTS[len(scene.objects) - 1])
    return pairs


def qa_sequence(ids, question_len):
    frozen = np.zeros(len(ids), bool)
    frozen[:question_len] = True
    return TokenSequence(np.asarray(ids, dtype=np.int64), frozen)


# ---------------------------------------------------------------------------
# examples and scoring
# ---------------------------------------------------------------------------


@dataclass
class Example:
    grid: np.ndarray
    caption: np.ndarray  # (TEXT_LEN,) ids
    qa: list  # [(ids, question_len), ...]

    @property
    def scene(self):
        return parse_caption(self.caption)


def generate_example(rng, length=TEXT_LEN):
    scene = random_scene(rng)
    return Example(render(scene), caption_ids(scene, length), qa_pairs(scene, length))


def generate_examples(count, seed, length=TEXT_LEN):
    rng = np.random.default_rng(seed)
    return [generate_example(rng, length) for _ in range(count)]


def score_scene(predicted, truth):
    """Attribute-level accuracy of a predicted scene against the truth.

    Objects align by index in quadrant order. The strict attribute accuracy
    counts 3 cells per object of the larger scene, so missing or spurious
    objects cost their full attribute triple; per-field accuracies are over
    aligned pairs only. An unparseable prediction (None) scores zero and is
    flagged.
    """
    if predicted is None:
        return {
            "attribute_acc": 0.0, "color_acc": 0.0, "shape_acc": 0.0,
            "quadrant_acc": 0.0, "count_acc": 0.0, "exact_match": 0.0,
            "unparseable": 1.0,
        }
    pairs = list(zip(predicted.objects, truth.objects))
    color = [p.color == t.color for p, t in pairs]
    shape = [p.shape == t.shape for p, t in pairs]
    quad = [p.quadrant == t.quadrant for p, t in pairs]
    correct_cells = sum(color) + sum(shape) + sum(quad)
    total_cells = 3 * max(len(predicted.objects), len(truth.objects))
    return {
        "attribute_acc": correct_cells / total_cells,
        "color_acc": float(np.mean(color)) if pairs else 0.0,
        "shape_acc": float(np.mean(shape)) if pairs else 0.0,
        "quadrant_acc": float(np.mean(quad)) if pairs else 0.0,
        "count_acc": float(len(predicted.objects) == len(truth.objects)),
        "exact_match": float(predicted == truth),
        "unparseable": 0.0,
    }


def score_caption(ids, truth):
    return score_scene(parse_caption(ids), truth)


def aggregate_scores(rows):
    """Mean of each metric over a list of score dicts."""
    if not rows:
        return {}
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


# ---------------------------------------------------------------------------
# dataset container format
# ---------------------------------------------------------------------------

_MAGIC = b"SYND"
_VERSION = 1


def dataset_config_hash(count, seed, length=TEXT_LEN):
    payload = json.dumps(
        {
            "count": count, "seed": seed, "grid": [GRID_H, GRID_W, GRID_C],
            "text_len": length, "vocab": list(WORDS),
        },
        sort_keys=True,
    ).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


def save_dataset(path, examples, seed):
    """Flat little-endian record stream plus a JSON manifest next to it."""
    length = len(examples[0].caption) if examples else TEXT_LEN
    chash = dataset_config_hash(len(examples), seed, length)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", _VERSION, len(examples)))
        f.write(struct.pack("<IIIII", GRID_H, GRID_W, GRID_C, length, VOCAB.size))
        f.write(bytes.fromhex(chash))
        for ex in examples:
            f.write(np.ascontiguousarray(ex.grid, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(ex.caption, dtype="<u2").tobytes())
            f.write(struct.pack("<H", len(ex.qa)))
            for ids, qlen in ex.qa:
                f.write(np.ascontiguousarray(ids, dtype="<u2").tobytes())
                f.write(struct.pack("<H", qlen))
    manifest = {
        "format": "dualdiff-dataset",
        "version": _VERSION,
        "count": len(examples),
        "seed": seed,
        "config_hash": chash,
        "grid": [GRID_H, GRID_W, GRID_C],
        "text_len": length,
        "vocab_size": VOCAB.size,
        "mask_id": VOCAB.mask_id,
        "vocab": list(WORDS),
    }
    with open(manifest_path(path), "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=1)
        f.write("\n")
    return chash


def manifest_path(path):
    return str(path) + ".manifest.json"


def load_dataset(path):
    """Read a record stream back; returns (examples, manifest_dict)."""
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise ConfigError(f"{path}: not a dataset file")
        version, count = struct.unpack("<IQ", f.read(12))
        if version != _VERSION:
            raise ConfigError(f"{path}: unsupported dataset version {version}")
        h, w, c, length, vocab_size = struct.unpack("<IIIII", f.read(20))
        if (h, w, c, vocab_size) != (GRID_H, GRID_W, GRID_C, VOCAB.size):
            raise ConfigError(f"{path}: geometry/vocab mismatch")
        chash = f.read(8).hex()
        examples = []
        grid_bytes = h * w * c * 8
        for _ in range(count):
            grid = np.frombuffer(f.read(grid_bytes), dtype="<f8").reshape(h, w, c).copy()
            caption = np.frombuffer(f.read(length * 2), dtype="<u2").astype(np.int64)
            (n_qa,) = struct.unpack("<H", f.read(2))
            qa = []
            for _ in range(n_qa):
                ids = np.frombuffer(f.read(length * 2), dtype="<u2").astype(np.int64)
                (qlen,) = struct.unpack("<H", f.read(2))
                qa.append((ids, qlen))
            examples.append(Example(grid, caption, qa))
    with open(manifest_path(path)) as f:
        manifest = json.load(f)
    if manifest["config_hash"] != chash:
        raise ConfigError(f"{path}: manifest hash disagrees with file header")
    return examples, manifest


# ---------------------------------------------------------------------------
# portable pixmap io (P6): the image interchange format of the CLI
# ---------------------------------------------------------------------------


def save_ppm(path, grid):
    """[-1, 1] grid to binary P6 with clamping."""
    grid = np.asarray(grid)
    u8 = np.clip(np.round((grid + 1.0) * 127.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode())
        f.write(u8.tobytes())


def load_ppm(path):
    with open(path, "rb") as f:
        if f.readline().strip() != b"P6":
            raise ConfigError(f"{path}: not a binary P6 pixmap")
        line = f.readline()
        while line.startswith(b"#"):
            line = f.readline()
        w, h = map(int, line.split())
        maxval = int(f.readline())
        if maxval != 255:
            raise ConfigError(f"{path}: expected maxval 255, got {maxval}")
        u8 = np.frombuffer(f.read(w * h * 3), dtype=np.uint8).reshape(h, w, 3)
    return u8.astype(np.float64) / 127.5 - 1.0
