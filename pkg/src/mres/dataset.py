"""Benchmark records, loaders, granularity filters, tokenization and statistics.

A benchmark split lives in ``<root>/<split>.jsonl``, one referring sample per
line::

    {"sample_id": "...", "image": "images/0001.png", "image_w": 32, "image_h": 32,
     "expression": "head of cow", "mask": {"w": 32, "h": 32, "counts": [...]},
     "granularity": "part", "object_category": "cow", "part_category": "head"}

``part_category`` is present exactly when ``granularity`` is ``"part"``.
"""

from __future__ import annotations

import enum
import json
import os
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import EmptyExpression, InvalidRle, MissingImage, SchemaError
from .masks import RleMask, rle_decode

SPLITS = ("val", "testA", "testB")
DATA_ROOT_ENV = "MRES_DATA_ROOT"

# Max token lengths including SOS and EOS.
MAX_LEN_DEFAULT = 17
MAX_LEN_LONG = 22
MAX_TEXT_LEN = {"refcoco": MAX_LEN_DEFAULT, "refcoco+": MAX_LEN_DEFAULT, "refcocom": MAX_LEN_DEFAULT,
                "refcocog": MAX_LEN_LONG}


class Granularity(str, enum.Enum):
    OBJECT = "object"
    PART = "part"


class EvalSetting(str, enum.Enum):
    OBJECT_ONLY = "object_only"
    PART_ONLY = "part_only"
    OBJECT_AND_PART = "object_and_part"


@dataclass(frozen=True)
class ReferringSample:
    sample_id: str
    image_ref: str
    image_w: int
    image_h: int
    expression: str
    mask: RleMask
    granularity: Granularity
    object_category: str
    part_category: str | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.image_w <= 0 or self.image_h <= 0:
            raise SchemaError("image size must be positive", field="image_w")
        if (self.mask.width, self.mask.height) != (self.image_w, self.image_h):
            raise SchemaError(
                f"mask is {self.mask.width}x{self.mask.height}, image is {self.image_w}x{self.image_h}",
                field="mask")
        if sum(self.mask.counts) != self.image_w * self.image_h:
            raise SchemaError("mask counts do not cover the image", field="mask")
        if not self.expression.strip():
            raise SchemaError("empty expression", field="expression")
        if self.granularity is Granularity.PART and not self.part_category:
            raise SchemaError("part sample without part_category", field="part_category")
        if self.granularity is Granularity.OBJECT and self.part_category is not None:
            raise SchemaError("object sample with part_category", field="part_category")

    def decode_mask(self) -> np.ndarray:
        return rle_decode(self.mask)

    def to_json(self) -> dict:
        rec = {
            "sample_id": self.sample_id,
            "image": self.image_ref,
            "image_w": self.image_w,
            "image_h": self.image_h,
            "expression": self.expression,
            "mask": self.mask.to_json(),
            "granularity": self.granularity.value,
            "object_category": self.object_category,
        }
        if self.part_category is not None:
            rec["part_category"] = self.part_category
        return rec


@dataclass(frozen=True)
class BenchmarkSplit:
    name: str
    samples: tuple[ReferringSample, ...]
    root: Path | None = None

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        seen = set()
        for s in self.samples:
            if s.sample_id in seen:
                raise SchemaError(f"duplicate sample_id {s.sample_id!r}", field="sample_id")
            seen.add(s.sample_id)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def load_image(self, sample: ReferringSample) -> np.ndarray:
        return load_image(self.root, sample.image_ref)


def default_root() -> Path | None:
    env = os.environ.get(DATA_ROOT_ENV)
    return Path(env) if env else None


_REQUIRED = {
    "sample_id": str, "image": str, "image_w": int, "image_h": int,
    "expression": str, "mask": dict, "granularity": str, "object_category": str,
}


def parse_record(rec: dict, line: int | None = None) -> ReferringSample:
    if not isinstance(rec, dict):
        raise SchemaError("record is not a JSON object", line=line)
    for key, typ in _REQUIRED.items():
        if key not in rec:
            raise SchemaError("missing field", line=line, field=key)
        if not isinstance(rec[key], typ) or (typ is int and isinstance(rec[key], bool)):
            raise SchemaError(f"expected {typ.__name__}", line=line, field=key)
    try:
        granularity = Granularity(rec["granularity"])
    except ValueError:
        raise SchemaError(f"unknown granularity {rec['granularity']!r}", line=line, field="granularity") from None
    part = rec.get("part_category")
    if part is not None and not isinstance(part, str):
        raise SchemaError("expected str", line=line, field="part_category")
    try:
        mask = RleMask.from_json(rec["mask"])
    except InvalidRle as exc:
        raise SchemaError(str(exc), line=line, field="mask") from None
    try:
        return ReferringSample(
            sample_id=rec["sample_id"], image_ref=rec["image"], image_w=rec["image_w"],
            image_h=rec["image_h"], expression=rec["expression"], mask=mask,
            granularity=granularity, object_category=rec["object_category"], part_category=part)
    except SchemaError as exc:
        raise SchemaError(exc.reason, line=line, field=exc.field) from None


def load_benchmark(root=None, split: str = "val", *, check_images: bool = False) -> BenchmarkSplit:
    """Load ``<root>/<split>.jsonl``; ``root`` defaults to ``$MRES_DATA_ROOT``."""
    root = Path(root) if root is not None else default_root()
    if root is None:
        raise SchemaError(f"no dataset root given and {DATA_ROOT_ENV} is unset")
    path = root / f"{split}.jsonl"
    if not path.is_file():
        raise SchemaError(f"split file not found: {path}")
    samples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, text in enumerate(fh, start=1):
            if not text.strip():
                continue
            try:
                rec = json.loads(text)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", line=lineno) from None
            samples.append(parse_record(rec, lineno))
    if not samples:
        raise SchemaError(f"empty split {split!r}")
    out = BenchmarkSplit(name=split, samples=samples, root=root)
    if check_images:
        for s in out:
            resolve_image(root, s.image_ref)
    return out


def dumps_sample(sample: ReferringSample) -> str:
    return json.dumps(sample.to_json(), ensure_ascii=False)


def save_benchmark(split: BenchmarkSplit, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in split:
            fh.write(dumps_sample(s) + "\n")


def resolve_image(root, image_ref: str) -> Path:
    path = Path(image_ref)
    if not path.is_absolute() and root is not None:
        path = Path(root) / path
    if not path.is_file():
        raise MissingImage(f"image not found: {image_ref}")
    return path


def load_image(root, image_ref: str) -> np.ndarray:
    """Return the image as an ``(h, w, 3)`` uint8 array."""
    from PIL import Image

    with Image.open(resolve_image(root, image_ref)) as img:
        return np.asarray(img.convert("RGB"))


def filter_setting(split: BenchmarkSplit, setting: EvalSetting | str) -> BenchmarkSplit:
    setting = EvalSetting(setting)
    if setting is EvalSetting.OBJECT_AND_PART:
        return split
    keep = Granularity.OBJECT if setting is EvalSetting.OBJECT_ONLY else Granularity.PART
    return BenchmarkSplit(split.name, [s for s in split if s.granularity is keep], split.root)


# --- tokenization -------------------------------------------------------------

class Tokenizer(Protocol):
    pad_id: int
    sos_id: int
    eos_id: int

    def encode(self, text: str) -> list[int]: ...

    def __len__(self) -> int: ...


class Vocabulary:
    """Lower-cased whitespace vocabulary with reserved special tokens."""

    PAD, SOS, EOS, UNK = "<pad>", "<sos>", "<eos>", "<unk>"

    def __init__(self, words: Iterable[str] = ()):
        self.itos = [self.PAD, self.SOS, self.EOS, self.UNK]
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            if w not in self.stoi:
                self.stoi[w] = len(self.itos)
                self.itos.append(w)
        self.pad_id, self.sos_id, self.eos_id, self.unk_id = 0, 1, 2, 3

    @staticmethod
    def split(text: str) -> list[str]:
        return text.lower().split()

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        words = sorted({w for t in texts for w in cls.split(t)})
        return cls(words)

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(w, self.unk_id) for w in self.split(text)]

    def __len__(self):
        return len(self.itos)

    def to_json(self) -> list[str]:
        return self.itos[4:]

    @classmethod
    def from_json(cls, words: Sequence[str]) -> "Vocabulary":
        return cls(words)


@dataclass(frozen=True)
class ExpressionTokens:
    ids: tuple[int, ...]
    true_length: int
    sos_id: int
    eos_id: int
    pad_id: int

    @property
    def max_len(self) -> int:
        return len(self.ids)


def tokenize(expression: str, vocab: Tokenizer, max_len: int = MAX_LEN_DEFAULT) -> ExpressionTokens:
    """SOS + body + EOS, right-padded; over-long bodies are cut to ``max_len - 2``."""
    if max_len < 3:
        raise ValueError("max_len must leave room for SOS, one token and EOS")
    if not expression or not expression.strip():
        raise EmptyExpression("expression is empty or whitespace")
    body = vocab.encode(expression)[: max_len - 2]
    ids = [vocab.sos_id, *body, vocab.eos_id]
    true_length = len(ids)
    ids += [vocab.pad_id] * (max_len - true_length)
    return ExpressionTokens(tuple(ids), true_length, vocab.sos_id, vocab.eos_id, vocab.pad_id)


# --- statistics -----------------------------------------------------------------

@dataclass
class CorpusStats:
    expressions_per_category: dict[str, int]
    expressions_per_object_category: dict[str, int]
    avg_expression_length: float
    num_masks: int
    num_references: int
    num_object_categories: int
    num_part_categories: int
    num_part_references: int = 0
    num_object_references: int = 0

    def to_json(self) -> dict:
        return {
            "num_references": self.num_references,
            "num_object_references": self.num_object_references,
            "num_part_references": self.num_part_references,
            "num_masks": self.num_masks,
            "avg_expression_length": self.avg_expression_length,
            "num_object_categories": self.num_object_categories,
            "num_part_categories": self.num_part_categories,
            "expressions_per_category": self.expressions_per_category,
            "expressions_per_object_category": self.expressions_per_object_category,
        }


def compute_stats(split: BenchmarkSplit) -> CorpusStats:
    """Corpus statistics; ``expressions_per_category`` is keyed by part category.

    Masks are counted once per distinct ``(image, mask)`` pair, since several
    references may share a mask.
    """
    samples = list(split)
    if not samples:
        raise SchemaError("cannot compute statistics of an empty split")
    parts = Counter(s.part_category for s in samples if s.granularity is Granularity.PART)
    objects = Counter(s.object_category for s in samples)
    words = sum(len(s.expression.split()) for s in samples)
    masks = {(s.image_ref, s.mask) for s in samples}
    return CorpusStats(
        expressions_per_category=dict(sorted(parts.items())),
        expressions_per_object_category=dict(sorted(objects.items())),
        avg_expression_length=words / len(samples),
        num_masks=len(masks),
        num_references=len(samples),
        num_object_categories=len(objects),
        num_part_categories=len(parts),
        num_part_references=sum(parts.values()),
        num_object_references=len(samples) - sum(parts.values()),
    )
