"""Model-assisted grounding data engine with pluggable backends.

Per image the engine runs the object branch (box prompts -> masks and
captions), the part branch (object categories -> part vocabulary -> part
masks/boxes -> captions), then scores every record's box crop against its
caption and keeps records whose similarity is strictly above 0.5.

Backends are plain objects with one method each:

* captioner: ``caption(image, norm_bbox, hint, granularity) -> str``
* promptable segmenter: ``segment(image, bbox) -> mask``
* part segmenter: ``segment_parts(image, vocabulary) -> [(tag, mask, bbox[, object]), ...]``
* decomposer: ``decompose(categories) -> [part tag, ...]``
* scorer: ``score(image, crop, bbox, caption) -> float in [0, 1]``

Deterministic stubs for all five live in this module; :class:`ProcessBackend`
talks to an external program over a JSON-lines stdio protocol.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import subprocess
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import BackendError, EmptyName, InvalidBox, SchemaError
from .masks import RleMask, as_binary, rle_encode

NORM_MAX = 999
SIMILARITY_THRESHOLD = 0.5
FULL_IMAGE_BOX = (0, 0, NORM_MAX, NORM_MAX)
DEFAULT_PARTS = ("top half", "bottom half")
BACKEND_ROLES = ("captioner", "promptable_segmenter", "part_segmenter", "decomposer", "scorer")


class RecordGranularity(str, enum.Enum):
    IMAGE = "image"
    OBJECT = "object"
    PART = "part"


@dataclass(frozen=True)
class BBox:
    x0: float
    y0: float
    x1: float
    y1: float

    def check(self, image_w: int, image_h: int) -> "BBox":
        if not (0 <= self.x0 <= self.x1 <= image_w and 0 <= self.y0 <= self.y1 <= image_h):
            raise InvalidBox(f"box {self.as_list()} invalid for a {image_w}x{image_h} image")
        return self

    def as_list(self) -> list[float]:
        return [self.x0, self.y0, self.x1, self.y1]

    @classmethod
    def of(cls, coords: Sequence[float]) -> "BBox":
        if len(coords) != 4:
            raise InvalidBox(f"box needs 4 coordinates, got {len(coords)}")
        return cls(*(float(c) for c in coords))


@dataclass(frozen=True)
class NormalizedBBox:
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        coords = self.as_tuple()
        if any(not 0 <= c <= NORM_MAX for c in coords) or self.x0 > self.x1 or self.y0 > self.y1:
            raise InvalidBox(f"normalized box {coords} outside [0, {NORM_MAX}] or inverted")

    def as_tuple(self) -> tuple[int, int, int, int]:
        return self.x0, self.y0, self.x1, self.y1

    def __str__(self):
        return f"({self.x0},{self.y0}),({self.x1},{self.y1})"


def _round_half_away(x: float) -> int:
    return int(math.floor(x + 0.5)) if x >= 0 else -int(math.floor(-x + 0.5))


def normalize_bbox(box: BBox, image_w: int, image_h: int) -> NormalizedBBox:
    """Map pixel coordinates to integers in ``[0, 999]``: ``round(c / dim * 999)``."""
    box.check(image_w, image_h)

    def norm(c, dim):
        return min(NORM_MAX, max(0, _round_half_away(c / dim * NORM_MAX)))

    return NormalizedBBox(norm(box.x0, image_w), norm(box.y0, image_h), norm(box.x1, image_w),
                          norm(box.y1, image_h))


def part_caption(part_name: str, object_name: str) -> str:
    if not part_name or not part_name.strip() or not object_name or not object_name.strip():
        raise EmptyName("part and object names must be non-empty")
    return f"{part_name} of {object_name}"


@dataclass
class EngineImage:
    image_ref: str
    pixels: np.ndarray  # (h, w, 3) uint8
    objects: list[tuple[BBox, str]] = field(default_factory=list)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass
class GroundingRecord:
    image_ref: str
    granularity: RecordGranularity
    bbox: BBox
    norm_bbox: NormalizedBBox
    caption: str
    object_category: str
    mask: RleMask | None = None
    part_category: str | None = None
    similarity: float | None = None
    error: str | None = None  # set when a backend failed for this record

    def validate(self) -> "GroundingRecord":
        if self.granularity is RecordGranularity.IMAGE and self.norm_bbox.as_tuple() != FULL_IMAGE_BOX:
            raise SchemaError("image-granularity record must use the full-image box", field="norm_bbox")
        if self.granularity is RecordGranularity.PART and not self.part_category:
            raise SchemaError("part record without part_category", field="part_category")
        if self.similarity is not None and not 0.0 <= self.similarity <= 1.0:
            raise SchemaError("similarity outside [0, 1]", field="similarity")
        if self.error is None and not self.caption:
            raise SchemaError("empty caption", field="caption")
        return self

    def to_json(self) -> dict:
        rec = {
            "image": self.image_ref,
            "granularity": self.granularity.value,
            "bbox": self.bbox.as_list(),
            "norm_bbox": list(self.norm_bbox.as_tuple()),
            "caption": self.caption,
            "object_category": self.object_category,
            "mask": self.mask.to_json() if self.mask is not None else None,
        }
        if self.part_category is not None:
            rec["part_category"] = self.part_category
        rec["similarity"] = self.similarity
        return rec


GROUNDING_RECORD_SCHEMA = {
    "type": "object",
    "required": ["image", "granularity", "bbox", "norm_bbox", "caption", "object_category", "mask", "similarity"],
    "properties": {
        "image": {"type": "string"},
        "granularity": {"enum": ["image", "object", "part"]},
        "bbox": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 4, "maxItems": 4},
        "norm_bbox": {"type": "array", "items": {"type": "integer", "minimum": 0, "maximum": NORM_MAX},
                      "minItems": 4, "maxItems": 4},
        "caption": {"type": "string", "minLength": 1},
        "object_category": {"type": "string"},
        "part_category": {"type": "string", "minLength": 1},
        "mask": {"oneOf": [
            {"type": "null"},
            {"type": "object", "required": ["w", "h", "counts"],
             "properties": {"w": {"type": "integer", "minimum": 1}, "h": {"type": "integer", "minimum": 1},
                            "counts": {"type": "array", "items": {"type": "integer", "minimum": 0}}}},
        ]},
        "similarity": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
    },
    "if": {"properties": {"granularity": {"const": "part"}}},
    "then": {"required": ["part_category"]},
}


# --- stub backends --------------------------------------------------------------

class EchoCaptioner:
    """Caption ``"obj:<hint>@<norm box>"`` (``part:`` for parts); pure function of its inputs."""

    def caption(self, image: EngineImage, norm_bbox: NormalizedBBox, hint: str,
                granularity: RecordGranularity = RecordGranularity.OBJECT) -> str:
        prefix = "part" if granularity is RecordGranularity.PART else "obj"
        return f"{prefix}:{hint}@{norm_bbox}"


class BoxSegmenter:
    """Promptable segmenter stub: the mask is the box interior."""

    def segment(self, image: EngineImage, bbox: BBox) -> np.ndarray:
        return box_mask(bbox, image.width, image.height)


class HalvesPartSegmenter:
    """Part segmenter stub producing half-box parts for known objects.

    For every object box of the image and every vocabulary tag naming a half
    (``top``, ``bottom``, ``left``, ``right``) the matching half of the box is
    returned. Other tags are ignored.
    """

    HALVES = ("top", "bottom", "left", "right")

    def segment_parts(self, image: EngineImage, vocabulary: Sequence[str]):
        out = []
        for box, _category in image.objects:
            for tag in vocabulary:
                half = tag.split()[0]
                if half not in self.HALVES:
                    continue
                b = half_box(box, half)
                if b.x1 - b.x0 <= 0 or b.y1 - b.y0 <= 0:
                    continue
                out.append((tag, box_mask(b, image.width, image.height), b, _category))
        return out


class TableDecomposer:
    """Part vocabulary from a fixed table ``{object category: [part tags]}``."""

    def __init__(self, table: dict[str, list[str]], default: Sequence[str] = ()):
        self.table = {k: list(v) for k, v in table.items()}
        self.default = list(default)

    def decompose(self, categories: Sequence[str]) -> list[str]:
        vocab: list[str] = []
        for cat in categories:
            for part in self.table.get(cat, self.default):
                if part not in vocab:
                    vocab.append(part)
        return vocab


class HashScorer:
    """Similarity from a SHA-256 of the caption and crop pixels, in ``[0, 1)``.

    ``overrides`` maps captions to fixed scores and ``failing`` captions raise.
    With ``default`` set, every other caption scores ``default`` instead of
    its hash.
    """

    def __init__(self, overrides: dict[str, float] | None = None, failing: Iterable[str] = (),
                 default: float | None = None):
        self.overrides = dict(overrides or {})
        self.failing = set(failing)
        self.default = default

    def score(self, image: EngineImage, crop: np.ndarray, bbox: BBox, caption: str) -> float:
        if caption in self.failing:
            raise BackendError(f"scorer refused caption {caption!r}")
        if caption in self.overrides:
            return float(self.overrides[caption])
        if self.default is not None:
            return float(self.default)
        digest = hashlib.sha256(caption.encode() + np.ascontiguousarray(crop).tobytes()).digest()
        return int.from_bytes(digest[:8], "big") / 2**64


def box_mask(b: BBox, width: int, height: int) -> np.ndarray:
    m = np.zeros((height, width), dtype=np.uint8)
    x0, y0 = int(math.floor(b.x0)), int(math.floor(b.y0))
    x1, y1 = int(math.ceil(b.x1)), int(math.ceil(b.y1))
    m[y0:y1, x0:x1] = 1
    return m


def half_box(b: BBox, half: str) -> BBox:
    xm, ym = (b.x0 + b.x1) / 2, (b.y0 + b.y1) / 2
    return {
        "top": BBox(b.x0, b.y0, b.x1, ym),
        "bottom": BBox(b.x0, ym, b.x1, b.y1),
        "left": BBox(b.x0, b.y0, xm, b.y1),
        "right": BBox(xm, b.y0, b.x1, b.y1),
    }[half]


# --- external process backend -------------------------------------------------------

class ProcessBackend:
    """Backend served by an external program, one JSON request/response per line.

    Requests carry ``{"op": ..., "image": <image_ref>, ...}``; responses are
    ``{"ok": true, "result": ...}`` or ``{"ok": false, "error": "..."}``. Masks
    travel as RLE objects ``{"w", "h", "counts"}``, boxes as ``[x0, y0, x1, y1]``.
    """

    def __init__(self, command: Sequence[str], cwd=None):
        self.command = list(command)
        self.proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True,
                                     cwd=cwd, bufsize=1)

    def request(self, payload: dict):
        if self.proc.poll() is not None:
            raise BackendError(f"backend process {self.command} exited with {self.proc.returncode}")
        self.proc.stdin.write(json.dumps(payload) + "\n")
        self.proc.stdin.flush()
        line = self.proc.stdout.readline()
        if not line:
            raise BackendError(f"backend process {self.command} closed its output")
        try:
            resp = json.loads(line)
        except json.JSONDecodeError as exc:
            raise BackendError(f"malformed backend response: {exc.msg}") from None
        if not resp.get("ok"):
            raise BackendError(str(resp.get("error", "backend reported failure")))
        return resp.get("result")

    def close(self):
        if self.proc.poll() is None:
            self.proc.stdin.close()
            self.proc.wait(timeout=10)

    def caption(self, image: EngineImage, norm_bbox: NormalizedBBox, hint: str,
                granularity: RecordGranularity = RecordGranularity.OBJECT) -> str:
        return str(self.request({"op": "caption", "image": image.image_ref, "norm_bbox": list(norm_bbox.as_tuple()),
                                 "hint": hint, "granularity": RecordGranularity(granularity).value}))

    def segment(self, image: EngineImage, bbox: BBox) -> np.ndarray:
        from .masks import rle_decode

        res = self.request({"op": "segment", "image": image.image_ref, "bbox": bbox.as_list()})
        return rle_decode(RleMask.from_json(res))

    def segment_parts(self, image: EngineImage, vocabulary: Sequence[str]):
        from .masks import rle_decode

        res = self.request({"op": "segment_parts", "image": image.image_ref, "vocabulary": list(vocabulary)})
        return [(r["tag"], rle_decode(RleMask.from_json(r["mask"])), BBox.of(r["bbox"]), r.get("object"))
                for r in res]

    def decompose(self, categories: Sequence[str]) -> list[str]:
        return [str(t) for t in self.request({"op": "decompose", "categories": list(categories)})]

    def score(self, image: EngineImage, crop: np.ndarray, bbox: BBox, caption: str) -> float:
        return float(self.request({"op": "score", "image": image.image_ref, "bbox": bbox.as_list(),
                                   "caption": caption}))


@dataclass
class BackendSuite:
    captioner: object
    promptable_segmenter: object
    part_segmenter: object
    decomposer: object
    scorer: object

    def close(self):
        for role in BACKEND_ROLES:
            closer = getattr(getattr(self, role), "close", None)
            if closer is not None:
                closer()

    @classmethod
    def stubs(cls, part_table: dict[str, list[str]] | None = None, score_overrides=None, failing_captions=(),
              default_score: float | None = None):
        table = part_table if part_table is not None else {}
        return cls(EchoCaptioner(), BoxSegmenter(), HalvesPartSegmenter(),
                   TableDecomposer(table, default=DEFAULT_PARTS),
                   HashScorer(score_overrides, failing_captions, default_score))


def _stub_backend(role: str, spec: dict):
    if role == "captioner":
        return EchoCaptioner()
    if role == "promptable_segmenter":
        return BoxSegmenter()
    if role == "part_segmenter":
        return HalvesPartSegmenter()
    if role == "decomposer":
        return TableDecomposer(spec.get("table", {}), spec.get("default", DEFAULT_PARTS))
    if role == "scorer":
        return HashScorer(spec.get("overrides"), spec.get("failing", ()), spec.get("default"))
    raise KeyError(role)


def load_backends(config) -> BackendSuite:
    """Build a suite from a dict or JSON file: ``{role: {"kind": "stub"|"process", ...}}``.

    A missing role raises ``KeyError`` naming it.
    """
    base = None
    if not isinstance(config, dict):
        base = Path(config).parent
        config = json.loads(Path(config).read_text(encoding="utf-8"))
    missing = [r for r in BACKEND_ROLES if r not in config]
    if missing:
        raise KeyError(f"backend config lacks {', '.join(missing)}")
    made = {}
    for role in BACKEND_ROLES:
        spec = config[role]
        kind = spec.get("kind", "stub")
        if kind == "stub":
            made[role] = _stub_backend(role, spec)
        elif kind == "process":
            made[role] = ProcessBackend(spec["command"], cwd=spec.get("cwd", base))
        else:
            raise ValueError(f"unknown backend kind {kind!r} for {role}")
    return BackendSuite(**made)


# --- pipeline ---------------------------------------------------------------------

def _failed(image: EngineImage, granularity, bbox: BBox, norm, category, part, exc) -> GroundingRecord:
    return GroundingRecord(image.image_ref, granularity, bbox, norm, "", category, None, part,
                           error=f"{type(exc).__name__}: {exc}")


def object_branch(image: EngineImage, boxes: Sequence[tuple[BBox, str]], backends: BackendSuite):
    """One object record per box; backend failures yield a record with ``error`` set."""
    records = []
    for bbox, category in boxes:
        norm = normalize_bbox(bbox, image.width, image.height)
        try:
            mask = as_binary(backends.promptable_segmenter.segment(image, bbox))
            caption = backends.captioner.caption(image, norm, category, RecordGranularity.OBJECT)
            records.append(GroundingRecord(image.image_ref, RecordGranularity.OBJECT, bbox, norm, caption,
                                           category, rle_encode(mask)))
        except Exception as exc:  # noqa: BLE001 - isolate any backend failure
            records.append(_failed(image, RecordGranularity.OBJECT, bbox, norm, category, None, exc))
    return records


def part_vocabulary(categories: Sequence[str], backends: BackendSuite) -> tuple[list[str], dict[str, str]]:
    """Deduplicated part vocabulary and the first object category naming each tag.

    The owner map labels part detections whose segmenter does not report the
    object they belong to.
    """
    vocab, owner = [], {}
    for cat in categories:
        for tag in backends.decomposer.decompose([cat]):
            if tag not in owner:
                owner[tag] = cat
                vocab.append(tag)
    return vocab, owner


def part_branch(image: EngineImage, categories: Sequence[str], backends: BackendSuite):
    if not categories:
        raise ValueError("part branch needs at least one object category")
    categories = list(dict.fromkeys(categories))
    vocab, owner = part_vocabulary(categories, backends)
    if not vocab:
        return []
    records = []
    for tag, mask, bbox, *obj in backends.part_segmenter.segment_parts(image, vocab):
        category = (obj[0] if obj and obj[0] else None) or owner.get(tag, categories[0])
        norm = normalize_bbox(bbox, image.width, image.height)
        try:
            caption = backends.captioner.caption(image, norm, part_caption(tag, category), RecordGranularity.PART)
            records.append(GroundingRecord(image.image_ref, RecordGranularity.PART, bbox, norm, caption, category,
                                           rle_encode(mask), tag))
        except Exception as exc:  # noqa: BLE001
            records.append(_failed(image, RecordGranularity.PART, bbox, norm, category, tag, exc))
    return records


def crop(image: EngineImage, bbox: BBox) -> np.ndarray:
    x0, y0 = int(math.floor(bbox.x0)), int(math.floor(bbox.y0))
    x1, y1 = int(math.ceil(bbox.x1)), int(math.ceil(bbox.y1))
    if x1 <= x0 or y1 <= y0:
        raise InvalidBox(f"zero-area crop {bbox.as_list()}")
    return image.pixels[y0:y1, x0:x1]


@dataclass
class Dropped:
    record: GroundingRecord
    reason: str  # backend_error | invalid_crop | scorer_error | low_similarity


def filter_records(image: EngineImage, records: Sequence[GroundingRecord], backends: BackendSuite,
                   threshold: float = SIMILARITY_THRESHOLD):
    """Split ``records`` into kept (similarity > threshold) and dropped; scores are written back."""
    kept, dropped = [], []
    for rec in records:
        if rec.error is not None:
            dropped.append(Dropped(rec, "backend_error"))
            continue
        try:
            patch = crop(image, rec.bbox)
        except InvalidBox:
            dropped.append(Dropped(rec, "invalid_crop"))
            continue
        try:
            score = float(backends.scorer.score(image, patch, rec.bbox, rec.caption))
            if not 0.0 <= score <= 1.0:
                raise BackendError(f"score {score} outside [0, 1]")
        except Exception:  # noqa: BLE001
            dropped.append(Dropped(rec, "scorer_error"))
            continue
        rec.similarity = score
        if score > threshold:
            kept.append(rec)
        else:
            dropped.append(Dropped(rec, "low_similarity"))
    return kept, dropped


class JsonlSink:
    """Append-only JSON-lines writer that schema-checks every record."""

    def __init__(self, path):
        import jsonschema

        self.path = Path(path)
        self._fh = self.path.open("w", encoding="utf-8")
        self._validator = jsonschema.Draft202012Validator(GROUNDING_RECORD_SCHEMA)
        self.count = 0

    def write(self, record: GroundingRecord) -> None:
        obj = record.validate().to_json()
        self._validator.validate(obj)
        self._fh.write(json.dumps(obj, sort_keys=True) + "\n")
        self.count += 1

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ListSink:
    def __init__(self):
        self.records: list[GroundingRecord] = []

    def write(self, record: GroundingRecord) -> None:
        self.records.append(record.validate())


@dataclass
class EngineReport:
    images: int = 0
    images_failed: int = 0
    generated: Counter = field(default_factory=Counter)
    kept: Counter = field(default_factory=Counter)
    dropped: Counter = field(default_factory=Counter)
    failures: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "images": self.images,
            "images_failed": self.images_failed,
            "generated": dict(sorted(self.generated.items())),
            "kept": dict(sorted(self.kept.items())),
            "dropped": dict(sorted(self.dropped.items())),
            "total_generated": sum(self.generated.values()),
            "total_kept": sum(self.kept.values()),
            "total_dropped": sum(self.dropped.values()),
            "failures": sorted(self.failures),
        }


def process_image(image: EngineImage, backends: BackendSuite):
    records = object_branch(image, image.objects, backends)
    categories = [c for _, c in image.objects]
    if categories:
        records += part_branch(image, categories, backends)
    kept, dropped = filter_records(image, records, backends)
    return records, kept, dropped


def run_engine(images: Iterable[EngineImage | Callable[[], EngineImage]], backends: BackendSuite, sink,
               report: EngineReport | None = None) -> EngineReport:
    """Run every image through both branches and the filter, streaming kept records to ``sink``.

    Items may be :class:`EngineImage` objects or zero-argument loaders; a
    loader or branch exception counts the image as failed and the run goes on.
    """
    report = report or EngineReport()
    for item in images:
        report.images += 1
        try:
            image = item() if callable(item) else item
            records, kept, dropped = process_image(image, backends)
        except Exception as exc:  # noqa: BLE001
            report.images_failed += 1
            report.failures.append(f"{getattr(item, 'image_ref', item)}: {type(exc).__name__}: {exc}")
            continue
        for rec in records:
            report.generated[rec.granularity.value] += 1
        for rec in kept:
            sink.write(rec)
            report.kept[rec.granularity.value] += 1
        for d in dropped:
            report.dropped[d.reason] += 1
    return report


def load_image_manifest(path) -> list[Callable[[], EngineImage]]:
    """Lazy loaders for a JSON-lines image manifest.

    Each line: ``{"image": path, "objects": [{"bbox": [x0, y0, x1, y1], "category": str}, ...]}``
    with image paths relative to the manifest's directory.
    """
    from .dataset import load_image

    path = Path(path)
    loaders = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            ref = rec["image"]
            objects = [(BBox.of(o["bbox"]), str(o["category"])) for o in rec.get("objects", [])]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise SchemaError(f"bad manifest entry: {exc}", line=lineno) from None

        def load(ref=ref, objects=objects):
            return EngineImage(ref, load_image(path.parent, ref), objects)

        load.image_ref = ref
        loaders.append(load)
    return loaders
