"""Structured semantic reports and their text-embedding targets.

A report is nine fixed diagnostic dimensions describing one lesion. Each
dimension is rendered through a fixed sentence template and encoded to a text
embedding row; the stacked rows form the per-image alignment target for the
semantic concept tokens. Embedding matrices are cached on disk in a small
binary format (magic ``C2PE``) so targets are computed once per image.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
from PIL import Image
from scipy import ndimage

__all__ = [
    "EmbeddingFileError",
    "EncodingError",
    "MllmConfig",
    "MockTextEncoder",
    "ReportSchemaError",
    "SemanticReport",
    "TextEncoder",
    "TransportError",
    "REPORT_FIELDS",
    "SENTENCE_TEMPLATES",
    "TEXT_EMBED_DIM",
    "build_sentences",
    "encode_report",
    "load_prompt_template",
    "make_visual_triplet",
    "mllm_generate",
    "parse_report",
    "read_embedding",
    "write_embedding",
]

TEXT_EMBED_DIM = 768

REPORT_FIELDS = (
    "morphology",
    "margin_definition",
    "internal_texture",
    "surrounding_interaction",
    "boundary_distinctness",
    "malignancy_risk",
    "pathological_inference",
    "differential_reasoning",
    "predicted_diagnosis",
)

# One template per diagnostic dimension, in REPORT_FIELDS order. The exact
# wording is part of the embedding contract: changing a template changes every
# cached embedding.
SENTENCE_TEMPLATES = (
    "The geometric shape and orientation of the lesion is {}",
    "The boundaries and margins of the lesion are {}",
    "The internal echo-texture and composition is {}",
    "The interaction with surrounding tissue shows {}",
    "The visual distinctness and contrast of the lesion edge is {}",
    "The estimated clinical malignancy risk assessment is {}",
    "The inferred micro-structural tissue characteristics are {}",
    "The clinical reasoning for distinguishing this from other mimics is {}",
    "The most likely specific diagnosis is {}",
)


class ReportSchemaError(ValueError):
    """A report is missing a dimension or has an empty value."""


class EmbeddingFileError(ValueError):
    """An embedding file is corrupt: bad magic, bad header, or truncated."""


class TransportError(RuntimeError):
    """The language-model endpoint could not be reached or answered abnormally."""


class EncodingError(RuntimeError):
    """A text encoder failed; carries the failing dimension index."""

    def __init__(self, dimension_index: int, cause: Exception):
        super().__init__(f"text encoder failed on dimension {dimension_index}: {cause}")
        self.dimension_index = dimension_index


@dataclass(frozen=True)
class SemanticReport:
    """Nine diagnostic statements about one lesion, all non-empty."""

    morphology: str
    margin_definition: str
    internal_texture: str
    surrounding_interaction: str
    boundary_distinctness: str
    malignancy_risk: str
    pathological_inference: str
    differential_reasoning: str
    predicted_diagnosis: str

    def values(self) -> tuple[str, ...]:
        return tuple(getattr(self, f) for f in REPORT_FIELDS)

    def to_json_dict(self) -> dict:
        return {f: getattr(self, f) for f in REPORT_FIELDS}


assert tuple(f.name for f in fields(SemanticReport)) == REPORT_FIELDS


def parse_report(obj) -> SemanticReport:
    """Build a report from a dict or JSON text.

    Unknown keys are ignored; a missing or empty dimension raises
    ReportSchemaError naming it.
    """
    if isinstance(obj, (str, bytes)):
        try:
            obj = json.loads(obj)
        except json.JSONDecodeError as e:
            raise ReportSchemaError(f"report is not valid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise ReportSchemaError(f"report must be a JSON object, got {type(obj).__name__}")
    values = {}
    for name in REPORT_FIELDS:
        if name not in obj:
            raise ReportSchemaError(f"report is missing dimension '{name}'")
        v = obj[name]
        if not isinstance(v, str) or not v.strip():
            raise ReportSchemaError(f"report dimension '{name}' must be a non-empty string")
        values[name] = v.strip()
    return SemanticReport(**values)


def build_sentences(report: SemanticReport) -> list[str]:
    """Render the nine template sentences for a report, in canonical order."""
    out = []
    for i, (template, value) in enumerate(zip(SENTENCE_TEMPLATES, report.values())):
        if not value.strip():
            raise ReportSchemaError(f"report dimension '{REPORT_FIELDS[i]}' is empty")
        out.append(template.format(value))
    return out


class TextEncoder(Protocol):
    """Anything that maps a sentence to a fixed-width float32 vector."""

    name: str
    dim: int

    def encode(self, sentence: str) -> np.ndarray: ...


def _stable_hash64(text: str) -> int:
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


class MockTextEncoder:
    """Deterministic stand-in encoder for offline runs and tests.

    Seeds a PCG64 generator from a stable 64-bit hash of the sentence bytes and
    emits a unit-norm standard-normal vector, so equal sentences map to equal
    rows on every platform and distinct sentences are nearly orthogonal at
    typical widths.
    """

    def __init__(self, dim: int = TEXT_EMBED_DIM):
        if dim < 1:
            raise ValueError("encoder dim must be >= 1")
        self.dim = dim
        self.name = f"mock-{dim}"

    def encode(self, sentence: str) -> np.ndarray:
        rng = np.random.default_rng(_stable_hash64(sentence))
        v = rng.standard_normal(self.dim)
        return (v / np.linalg.norm(v)).astype(np.float32)


def encode_report(report: SemanticReport, encoder: TextEncoder) -> np.ndarray:
    """Encode a report to its (9, dim) float32 embedding matrix.

    Row ``j`` is the encoding of sentence ``j``. Encoder failures are wrapped
    with the failing dimension index; non-finite rows are rejected.
    """
    rows = []
    for i, sentence in enumerate(build_sentences(report)):
        try:
            row = np.asarray(encoder.encode(sentence), dtype=np.float32).reshape(-1)
        except Exception as e:  # noqa: BLE001 - deliberately wrapped with context
            raise EncodingError(i, e) from e
        if row.size != encoder.dim:
            raise EncodingError(i, ValueError(f"encoder returned {row.size} values, expected {encoder.dim}"))
        if not np.isfinite(row).all():
            raise EncodingError(i, ValueError("encoder returned non-finite values"))
        rows.append(row)
    return np.stack(rows, axis=0)


# ---------------------------------------------------------------------------
# Embedding file format: magic "C2PE", little-endian u32 version/rows/cols
# header, then row-major float32 payload. Trailing bytes are an error.

_EMBED_MAGIC = b"C2PE"
_EMBED_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def write_embedding(path, matrix: np.ndarray) -> None:
    m = np.ascontiguousarray(np.asarray(matrix, dtype=np.float32))
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"embedding must be a nonempty 2-D matrix, got shape {m.shape}")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_EMBED_MAGIC, _EMBED_VERSION, m.shape[0], m.shape[1]))
        f.write(m.astype("<f4").tobytes())


def read_embedding(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise EmbeddingFileError(f"{path}: truncated header")
    magic, version, rows, cols = _HEADER.unpack_from(data)
    if magic != _EMBED_MAGIC:
        raise EmbeddingFileError(f"{path}: bad magic {magic!r}")
    if version != _EMBED_VERSION:
        raise EmbeddingFileError(f"{path}: unsupported version {version}")
    if rows < 1 or cols < 1:
        raise EmbeddingFileError(f"{path}: invalid dimensions {rows}x{cols}")
    expected = _HEADER.size + 4 * rows * cols
    if len(data) < expected:
        raise EmbeddingFileError(
            f"{path}: payload truncated, expected {expected} bytes, got {len(data)}"
        )
    if len(data) > expected:
        raise EmbeddingFileError(f"{path}: {len(data) - expected} trailing bytes")
    flat = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    return flat.reshape(rows, cols).astype(np.float32)


# ---------------------------------------------------------------------------
# Report generation through a multimodal language model. The visual input is
# a triplet: raw image, contour-annotated image, and the binary mask.


def make_visual_triplet(image: np.ndarray, mask: np.ndarray, ring_px: int = 2):
    """(raw, contour-annotated, mask) views of one sample, all float in [0, 1].

    The annotation is a dilated boundary ring painted at full intensity.
    """
    img = np.asarray(image, dtype=np.float32)
    m = np.asarray(mask).astype(bool)
    if img.shape != m.shape:
        raise ValueError(f"image {img.shape} and mask {m.shape} shapes differ")
    if m.any():
        outer = ndimage.binary_dilation(m, iterations=ring_px)
        inner = ndimage.binary_erosion(m, iterations=ring_px)
        ring = outer & ~inner
    else:
        ring = np.zeros_like(m)
    annotated = img.copy()
    annotated[ring] = 1.0
    return img, annotated, m.astype(np.float32)


@dataclass
class MllmConfig:
    """Connection settings for a hosted multimodal model endpoint."""

    endpoint: str = ""
    model: str = ""
    timeout_s: float = 30.0
    max_retries: int = 2


def load_prompt_template(template_path, slots: dict[str, str]) -> str:
    """Fill a prompt template's {ROLE}/{TASKS}/{IMAGE_MODE}/{CONTEXT} slots.

    Plain token replacement, not str.format, so JSON braces in the template
    survive. Every slot token present in the template must be provided.
    """
    text = Path(template_path).read_text(encoding="utf-8")
    for key in ("ROLE", "TASKS", "IMAGE_MODE", "CONTEXT"):
        token = "{" + key + "}"
        if token in text:
            if key not in slots:
                raise KeyError(f"prompt template needs a value for {token}")
            text = text.replace(token, slots[key])
    return text


class MllmClient(Protocol):
    def generate(self, images: tuple[np.ndarray, ...], prompt: str) -> str: ...


class CannedMllmClient:
    """Offline client that replays scripted responses (tests, demos)."""

    def __init__(self, responses: list[str]):
        self._responses = list(responses)
        self.calls = 0

    def generate(self, images, prompt) -> str:
        if not self._responses:
            raise TransportError("canned client ran out of responses")
        self.calls += 1
        return self._responses.pop(0)


def _to_png_data_url(image: np.ndarray) -> str:
    arr = np.clip(np.asarray(image, dtype=np.float32), 0.0, 1.0)
    buf = io.BytesIO()
    Image.fromarray((arr * 255).astype(np.uint8), mode="L").save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


class HttpMllmClient:
    """Minimal chat-completions client for a real endpoint. Not used in tests."""

    def __init__(self, config: MllmConfig):
        if not config.endpoint:
            raise ValueError("mllm endpoint is not configured")
        self.config = config

    def generate(self, images, prompt) -> str:
        import requests

        content = [{"type": "text", "text": prompt}]
        for img in images:
            content.append(
                {"type": "image_url", "image_url": {"url": _to_png_data_url(img)}}
            )
        payload = {
            "model": self.config.model,
            "messages": [{"role": "user", "content": content}],
        }
        try:
            resp = requests.post(
                self.config.endpoint, json=payload, timeout=self.config.timeout_s
            )
            resp.raise_for_status()
            body = resp.json()
            return body["choices"][0]["message"]["content"]
        except Exception as e:  # noqa: BLE001 - network/shape failures unified
            raise TransportError(f"mllm request failed: {e}") from e


def mllm_generate(
    triplet: tuple[np.ndarray, np.ndarray, np.ndarray],
    prompt: str,
    client: MllmClient,
    max_retries: int = 2,
) -> SemanticReport:
    """Ask the model for a report; retry malformed answers, propagate transport failures.

    The response must be a strict JSON object covering all nine dimensions
    (extra keys tolerated). After ``max_retries`` additional attempts the last
    schema error is raised.
    """
    attempts = max_retries + 1
    last_error: ReportSchemaError | None = None
    for _ in range(attempts):
        text = client.generate(triplet, prompt)
        try:
            return parse_report(text)
        except ReportSchemaError as e:
            last_error = e
    assert last_error is not None
    raise last_error
