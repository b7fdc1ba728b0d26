"""Versioned JSON text container shared by every artifact the toolkit writes."""

from __future__ import annotations

import base64
import json
import os
import tempfile
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed artifact. ``position`` is a character offset when known."""

    def __init__(self, message: str, position: int | None = None):
        if position is not None:
            message = f"{message} (at position {position})"
        super().__init__(message)
        self.position = position


class UnsupportedVersionError(FormatError):
    pass


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(obj, where: str = "") -> np.ndarray:
    try:
        shape = tuple(int(d) for d in obj["shape"])
        raw = base64.b64decode(obj["data"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bad array payload {where}: {exc}") from None
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) != 8 * count:
        raise FormatError(f"array payload {where} has {len(raw)} bytes, expected {8 * count} for shape {shape}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def dumps(kind: str, body: dict) -> str:
    doc = {"format": kind, "version": FORMAT_VERSION, **body}
    return json.dumps(doc, indent=1, sort_keys=False) + "\n"


def loads(text: str | bytes, kind: str) -> dict:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("stream is not valid UTF-8", exc.start) from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed {kind} stream: {exc.msg}", exc.pos) from None
    if not isinstance(doc, dict):
        raise FormatError(f"{kind} stream must hold a JSON object", 0)
    if doc.get("format") != kind:
        raise FormatError(f"expected format {kind!r}, found {doc.get('format')!r}")
    version = doc.get("version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"unsupported {kind} version {version!r}; this build reads version {FORMAT_VERSION}"
        )
    return doc


def write_atomic(path: str | os.PathLike, content: str | bytes) -> None:
    """Write via a temporary sibling file and rename, so readers never see partial output."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = content.encode("utf-8") if isinstance(content, str) else content
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
