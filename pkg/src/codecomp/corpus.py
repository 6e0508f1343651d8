"""Image-caption corpus handling and the synthetic shapes corpus.

Covers manifest ingestion (newline-delimited JSON), noun extraction with a
bundled rule/lexicon part-of-speech tagger, noun sampling, and a generator
of shapes-on-plain-background images whose captions carry exact ground
truth for both region masks and word-token spans.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import tokenizer

DEFAULT_MAX_TEXT_LEN = 32

# ---------------------------------------------------------------------------
# domain types


@dataclass
class ImageSample:
    pixels: np.ndarray  # H x W x 3 float in [0, 1]
    id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError("pixels must be H x W x 3, got %r" % (px.shape,))
        if px.shape[0] < 8 or px.shape[1] < 8:
            raise ValueError("image smaller than 8 x 8")
        if not np.isfinite(px).all():
            raise ValueError("non-finite pixel values")
        if px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values outside [0, 1]")
        self.pixels = px


@dataclass
class TextSample:
    tokens: list  # padded token ids, pad suffix only
    raw_text: str
    word_spans: list  # (start, end) per surface word, ordered

    @classmethod
    def from_text(cls, text, max_len=DEFAULT_MAX_TEXT_LEN):
        tokens, spans = tokenizer.encode(text, max_len)
        return cls(tokens=tokens, raw_text=text, word_spans=spans)

    @property
    def length(self):
        """Number of unpadded tokens."""
        n = len(self.tokens)
        while n > 0 and self.tokens[n - 1] == tokenizer.PAD_ID:
            n -= 1
        return n


@dataclass
class NounQuery:
    noun_text: str
    token_span: tuple  # (start, end) into TextSample.tokens
    index_j: int  # 1-based position among the caption's nouns


@dataclass
class CorpusManifest:
    entries: list  # (image_uri, caption)
    format_version: int = 1


@dataclass
class SyntheticSample:
    image: ImageSample
    text: TextSample
    gt_region_masks: list = field(default_factory=list)  # H x W uint8 per noun
    gt_word_masks: list = field(default_factory=list)  # L bool array per noun
    nouns: list = field(default_factory=list)  # shape-class name per noun


# ---------------------------------------------------------------------------
# manifest

class ManifestError(ValueError):
    pass


def load_manifest(path):
    """Load a newline-delimited JSON manifest of {"image", "caption"} records."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError("line %d: invalid JSON (%s)" % (lineno, exc))
            if not isinstance(rec, dict) or "image" not in rec or "caption" not in rec:
                raise ManifestError(
                    "line %d: record must have 'image' and 'caption' fields" % lineno
                )
            if not rec["caption"]:
                raise ManifestError("line %d: empty caption" % lineno)
            entries.append((rec["image"], rec["caption"]))
    if not entries:
        raise ManifestError("empty manifest: %s" % path)
    return CorpusManifest(entries=entries)


def save_manifest(manifest, path):
    with open(path, "w", encoding="utf-8") as fh:
        for image_uri, caption in manifest.entries:
            fh.write(json.dumps({"image": image_uri, "caption": caption}) + "\n")


# ---------------------------------------------------------------------------
# noun tagging

NOUN_LEXICON = frozenset([
    "circle", "square", "triangle", "rectangle", "ellipse", "diamond",
    "star", "cross", "ring", "hexagon", "shape", "object", "background",
    "photo", "picture", "image", "car", "dog", "cat", "pub", "night",
    "day", "man", "woman", "person", "people", "tree", "house", "street",
    "sky", "water", "table", "chair", "boat", "train", "bird", "horse",
    "balloon", "grass", "road", "building", "light", "room", "city",
    "park", "beach", "food", "plate", "glass", "wall", "door", "window",
    "field", "mountain", "river",
])

# closed-class words, adjectives and verbs that must never tag as nouns
NON_NOUN_LEXICON = frozenset([
    "a", "an", "the", "and", "or", "of", "on", "in", "at", "with", "to",
    "is", "are", "was", "were", "it", "its", "this", "that", "by", "for",
    "red", "green", "blue", "yellow", "purple", "orange", "cyan",
    "magenta", "white", "black", "gray", "grey", "pink", "brown",
    "small", "large", "big", "little", "bright", "dark", "old", "new",
    "running", "walking", "sitting", "standing", "flying", "quickly",
    "slowly", "two", "three", "four", "one", "next", "near", "above",
    "below", "beside",
])

_NOUN_SUFFIXES = ("tion", "sion", "ment", "ness", "ity", "ism")


def _is_noun(word):
    if word in NOUN_LEXICON:
        return True
    if word in NON_NOUN_LEXICON:
        return False
    return word.endswith(_NOUN_SUFFIXES)


class LexiconTagger:
    """Bundled deterministic rule/lexicon noun tagger (hermetic default)."""

    def noun_flags(self, words):
        return [_is_noun(w) for w in words]


def extract_nouns(text, tagger=None, keep_duplicates=True):
    """Extract noun queries from a caption, ordered by position.

    Duplicate surface nouns at different token spans are kept as distinct
    queries by default; set keep_duplicates=False to keep first occurrences
    only. The tagger is pluggable; any object with noun_flags(words) works.
    """
    if text.length < 1:
        raise ValueError("text has no unpadded tokens")
    tagger = tagger or LexiconTagger()
    words = tokenizer.split_words(text.raw_text)
    # word_spans may be truncated relative to the raw text
    words = words[: len(text.word_spans)]
    flags = tagger.noun_flags(words)
    queries = []
    seen_spans = set()
    seen_words = set()
    for word, span, flag in zip(words, text.word_spans, flags):
        if not flag:
            continue
        if span in seen_spans:
            continue
        if not keep_duplicates and word in seen_words:
            continue
        seen_spans.add(span)
        seen_words.add(word)
        queries.append(
            NounQuery(noun_text=word, token_span=tuple(span), index_j=len(queries) + 1)
        )
    return queries


class NoTrainableNouns(ValueError):
    """Raised when a caption yields no noun queries to sample from."""


def sample_nouns(queries, count, rng):
    """Sample min(count, J) distinct queries uniformly without replacement."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not queries:
        raise NoTrainableNouns("caption has no noun queries")
    k = min(count, len(queries))
    idx = rng.choice(len(queries), size=k, replace=False)
    return [queries[i] for i in idx]


# ---------------------------------------------------------------------------
# synthetic shapes corpus

SHAPE_CLASSES = ("circle", "square", "triangle")

COLOR_TABLE = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.75, 0.15),
    "blue": (0.12, 0.20, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "purple": (0.55, 0.15, 0.75),
    "cyan": (0.10, 0.80, 0.80),
}

BACKGROUND_COLOR = (0.5, 0.5, 0.5)


@dataclass
class SyntheticSpec:
    n_samples: int = 100
    image_size: int = 32
    shape_classes: tuple = SHAPE_CLASSES
    colors: tuple = tuple(COLOR_TABLE)
    min_shapes: int = 1
    max_shapes: int = 3
    seed: int = 0
    max_text_len: int = DEFAULT_MAX_TEXT_LEN

    def __post_init__(self):
        if len(self.shape_classes) < 2:
            raise ValueError("need >= 2 shape classes")
        if len(self.colors) < 2:
            raise ValueError("need >= 2 colors")
        if self.image_size < 16:
            raise ValueError("image size must be >= 16")
        if self.max_shapes > len(self.shape_classes):
            raise ValueError("max_shapes exceeds the number of shape classes")


def rasterize_shape(shape, size, cx, cy, radius):
    """Exact binary mask of a shape on a size x size grid.

    Pixel (r, c) is inside iff its integer coordinates satisfy the shape
    inequalities; the same arithmetic serves as the independent oracle in
    tests.
    """
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "circle":
        return ((xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2).astype(np.uint8)
    if shape == "square":
        return ((np.abs(xx - cx) <= radius) & (np.abs(yy - cy) <= radius)).astype(np.uint8)
    if shape == "triangle":
        # upward triangle: apex at (cx, cy - radius), base at cy + radius
        inside = (yy >= cy - radius) & (yy <= cy + radius)
        # width grows linearly from apex to base
        half_w = (yy - (cy - radius)) / 2.0
        inside &= np.abs(xx - cx) <= half_w
        return inside.astype(np.uint8)
    raise ValueError("unknown shape %r" % shape)


def _place_shapes(spec, n_shapes, rng, max_tries=40):
    """Place shapes without overlap; returns list of (shape, color, mask).

    Shape classes are drawn without replacement so every caption noun
    refers to a unique region and the ground truth stays unambiguous.
    """
    size = spec.image_size
    placed = []
    occupied = np.zeros((size, size), dtype=bool)
    class_order = rng.permutation(len(spec.shape_classes))
    for k in range(n_shapes):
        shape = spec.shape_classes[class_order[k]]
        color = spec.colors[rng.integers(len(spec.colors))]
        ok = False
        for _ in range(max_tries):
            radius = int(rng.integers(max(3, size // 10), max(4, size // 5) + 1))
            cx = int(rng.integers(radius, size - radius))
            cy = int(rng.integers(radius, size - radius))
            mask = rasterize_shape(shape, size, cx, cy, radius)
            if mask.sum() == 0:
                continue
            if not (occupied & mask.astype(bool)).any():
                ok = True
                break
        if not ok:
            return None
        occupied |= mask.astype(bool)
        placed.append((shape, color, mask))
    return placed


def generate_synthetic_sample(spec, rng, sample_id=""):
    """Generate one shapes image with caption and exact ground truth."""
    n_shapes = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    placed = None
    while placed is None and n_shapes >= 1:
        placed = _place_shapes(spec, n_shapes, rng)
        if placed is None:
            n_shapes -= 1
    if placed is None:
        raise RuntimeError("could not place any shape")

    size = spec.image_size
    pixels = np.empty((size, size, 3), dtype=np.float64)
    pixels[:] = BACKGROUND_COLOR
    phrases = []
    for shape, color, mask in placed:
        rgb = COLOR_TABLE[color]
        pixels[mask.astype(bool)] = rgb
        phrases.append("a %s %s" % (color, shape))
    caption = " and ".join(phrases)

    text = TextSample.from_text(caption, max_len=spec.max_text_len)
    image = ImageSample(pixels=pixels, id=sample_id)

    # ground-truth word masks over the "{color} {shape}" spans
    words = tokenizer.split_words(caption)
    gt_word_masks = []
    word_idx = 0
    for shape, color, mask in placed:
        # skip "a" (and the "and" joiner before subsequent phrases)
        while words[word_idx] in ("a", "and"):
            word_idx += 1
        color_span = text.word_spans[word_idx]
        shape_span = text.word_spans[word_idx + 1]
        word_idx += 2
        wmask = np.zeros(len(text.tokens), dtype=bool)
        wmask[color_span[0]:shape_span[1]] = True
        gt_word_masks.append(wmask)

    return SyntheticSample(
        image=image,
        text=text,
        gt_region_masks=[mask for _, _, mask in placed],
        gt_word_masks=gt_word_masks,
        nouns=[shape for shape, _, _ in placed],
    )


def generate_synthetic_corpus(spec):
    """Generate spec.n_samples synthetic samples, deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    return [
        generate_synthetic_sample(spec, rng, sample_id="synth-%05d" % i)
        for i in range(spec.n_samples)
    ]


def export_synthetic_corpus(samples, out_dir):
    """Write manifest.jsonl, image PNGs and ground-truth sidecars."""
    os.makedirs(out_dir, exist_ok=True)
    img_dir = os.path.join(out_dir, "images")
    gt_dir = os.path.join(out_dir, "gt")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(gt_dir, exist_ok=True)
    entries = []
    for sample in samples:
        img_name = sample.image.id + ".png"
        img_path = os.path.join(img_dir, img_name)
        arr = np.round(sample.image.pixels * 255.0).astype(np.uint8)
        Image.fromarray(arr).save(img_path)
        for j, mask in enumerate(sample.gt_region_masks):
            mask_path = os.path.join(gt_dir, "%s_region%d.png" % (sample.image.id, j))
            Image.fromarray((mask * 255).astype(np.uint8)).save(mask_path)
        word_gt = {
            "nouns": sample.nouns,
            "word_masks": [np.flatnonzero(m).tolist() for m in sample.gt_word_masks],
        }
        with open(os.path.join(gt_dir, sample.image.id + "_words.json"), "w") as fh:
            json.dump(word_gt, fh)
        entries.append((os.path.join("images", img_name), sample.text.raw_text))
    manifest = CorpusManifest(entries=entries)
    save_manifest(manifest, os.path.join(out_dir, "manifest.jsonl"))
    return manifest


def load_image(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return ImageSample(pixels=arr, id=os.path.splitext(os.path.basename(path))[0])
