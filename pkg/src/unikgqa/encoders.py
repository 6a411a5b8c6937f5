"""Text encoders for questions and relation names.

The propagation model only needs fixed-width vectors for the question and
for each relation label, so the encoder is a pluggable interface with
three backends:

* ``ToyEncoder`` — a trainable bag-of-tokens table (mean of token rows
  followed by tanh). This is the only backend the contrastive
  pre-training phase can update; it is frozen afterwards.
* ``FileEncoder`` — exact lookup of precomputed vectors from a binary
  file (see ``write_embedding_file`` for the record layout).
* ``RemoteEncoder`` — POSTs ``{"texts": [...]}`` to an embedding service
  and expects ``{"vectors": [[...], ...]}`` back; retries twice on
  failure.

Relation labels are textualized before encoding (dots and underscores
become spaces) so multi-part names like ``people.person.spouse`` read as
words. All backends cache by exact (kind, text) key; cached and uncached
paths return identical vectors.
"""

from __future__ import annotations

import hashlib
import logging
import re
import struct
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

UNK_TOKEN = "<unk>"
_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")

EMBED_FILE_MAGIC = b"UKQV"
ENCODER_FILE_MAGIC = b"UKQE"


class EncoderError(RuntimeError):
    """Raised when a backend cannot produce a vector."""


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and punctuation, drop empties."""
    return [tok for tok in _TOKEN_SPLIT.split(text.lower()) if tok]


def textualize_relation(label: str) -> str:
    """Make a relation name encodable as text: dots/underscores to
    spaces, lowercased."""
    return label.replace(".", " ").replace("_", " ").lower()


class TextEncoder:
    """Shared caching layer; subclasses implement ``_encode_text``."""

    def __init__(self, dim: int):
        self.dim = dim
        self._cache: dict[tuple[str, str], np.ndarray] = {}

    def encode(self, text: str, kind: str = "question") -> np.ndarray:
        if kind not in ("question", "relation"):
            raise ValueError(f"kind must be 'question' or 'relation', got {kind!r}")
        key = (kind, text)
        if key not in self._cache:
            prepared = textualize_relation(text) if kind == "relation" else text
            vec = np.asarray(self._encode_text(prepared), dtype=np.float64)
            if vec.shape != (self.dim,):
                raise EncoderError(
                    f"backend returned shape {vec.shape}, expected ({self.dim},)"
                )
            if not np.all(np.isfinite(vec)):
                raise EncoderError(f"non-finite embedding for {text!r}")
            self._cache[key] = vec
        return self._cache[key]

    def encode_batch(self, texts: Sequence[str], kind: str = "question") -> list[np.ndarray]:
        out = []
        for i, text in enumerate(texts):
            try:
                out.append(self.encode(text, kind))
            except Exception as exc:
                raise EncoderError(f"failed to encode element {i} ({text!r}): {exc}") from exc
        return out

    def invalidate_cache(self) -> None:
        self._cache.clear()

    @property
    def cache_size(self) -> int:
        return len(self._cache)

    def cache_identity(self) -> str:
        """Stable name for the persistent cache file; must change whenever
        the backend would produce different vectors."""
        raise NotImplementedError

    def save_cache(self, path: str) -> None:
        if not self._cache:
            return
        arrays = {f"{kind}\x00{text}": vec for (kind, text), vec in self._cache.items()}
        np.savez(path, **arrays)

    def load_cache(self, path: str) -> None:
        with np.load(path) as data:
            for key in data.files:
                kind, _, text = key.partition("\x00")
                self._cache[(kind, text)] = data[key]

    def _encode_text(self, text: str) -> np.ndarray:
        raise NotImplementedError


class ToyEncoder(TextEncoder):
    """Trainable token-embedding encoder: tanh of the mean of token rows.

    Out-of-vocabulary tokens map to a reserved row. The table is only
    mutable while ``trainable`` is True; pre-training freezes it when
    done.
    """

    def __init__(self, vocab: Sequence[str], dim: int, rng: np.random.Generator):
        super().__init__(dim)
        tokens = [UNK_TOKEN] + sorted(set(vocab) - {UNK_TOKEN})
        self.vocab: dict[str, int] = {tok: i for i, tok in enumerate(tokens)}
        self.tokens: list[str] = tokens
        scale = 1.0 / np.sqrt(dim)
        self.table = rng.uniform(-scale, scale, size=(len(tokens), dim))
        self.trainable = True

    @classmethod
    def from_corpus(
        cls, texts: Iterable[str], dim: int, seed: int = 0
    ) -> "ToyEncoder":
        vocab: set[str] = set()
        for text in texts:
            vocab.update(tokenize(text))
        return cls(sorted(vocab), dim, np.random.default_rng(seed))

    def token_ids(self, text: str) -> list[int]:
        ids = [self.vocab.get(tok, 0) for tok in tokenize(text)]
        return ids or [0]

    def _encode_text(self, text: str) -> np.ndarray:
        return np.tanh(self.table[self.token_ids(text)].mean(axis=0))

    def freeze(self) -> None:
        self.trainable = False

    def accumulate_grad(
        self, text: str, kind: str, grad_vec: np.ndarray, grad_table: np.ndarray
    ) -> None:
        """Backprop a d(loss)/d(vector) into d(loss)/d(table rows).

        Chain rule through tanh and the token mean; repeated tokens
        receive one share per occurrence, mirroring the forward mean.
        """
        vec = self.encode(text, kind)
        ids = self.token_ids(
            textualize_relation(text) if kind == "relation" else text
        )
        pre = (1.0 - vec * vec) * grad_vec / len(ids)
        np.add.at(grad_table, ids, pre)

    def apply_update(self, delta: np.ndarray) -> None:
        if not self.trainable:
            raise EncoderError("encoder is frozen; updates are not allowed")
        self.table += delta
        self.invalidate_cache()

    def set_table(self, table: np.ndarray) -> None:
        if not self.trainable:
            raise EncoderError("encoder is frozen; updates are not allowed")
        if table.shape != self.table.shape:
            raise EncoderError(
                f"table shape {table.shape} != expected {self.table.shape}"
            )
        self.table = table.astype(np.float64)
        self.invalidate_cache()

    def checksum(self) -> float:
        return float(np.abs(self.table).sum())

    def cache_identity(self) -> str:
        digest = hashlib.sha256(self.table.tobytes()).hexdigest()[:16]
        return f"toy_{self.dim}_{digest}"

    # -- persistence -------------------------------------------------------

    def save(self, path: str) -> None:
        with open(path, "wb") as f:
            f.write(ENCODER_FILE_MAGIC)
            f.write(struct.pack("<IIIB", 1, self.dim, len(self.tokens),
                                0 if self.trainable else 1))
            for tok in self.tokens:
                raw = tok.encode("utf-8")
                f.write(struct.pack("<I", len(raw)))
                f.write(raw)
                f.write(self.table[self.vocab[tok]].astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str) -> "ToyEncoder":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != ENCODER_FILE_MAGIC:
                raise EncoderError(f"{path}: bad magic {magic!r}")
            version, dim, count, frozen = struct.unpack("<IIIB", f.read(13))
            if version != 1:
                raise EncoderError(f"{path}: unsupported version {version}")
            tokens = []
            rows = []
            for _ in range(count):
                (klen,) = struct.unpack("<I", f.read(4))
                tokens.append(f.read(klen).decode("utf-8"))
                rows.append(np.frombuffer(f.read(8 * dim), dtype="<f8"))
        enc = cls.__new__(cls)
        TextEncoder.__init__(enc, dim)
        enc.tokens = tokens
        enc.vocab = {tok: i for i, tok in enumerate(tokens)}
        enc.table = np.array(rows, dtype=np.float64)
        enc.trainable = frozen == 0
        return enc


class FileEncoder(TextEncoder):
    """Exact-lookup backend over a precomputed embedding file."""

    def __init__(self, path: str):
        keys, dim, vectors = read_embedding_file(path)
        super().__init__(dim)
        self._path = path
        self._vectors = {k: v for k, v in zip(keys, vectors)}
        self.trainable = False

    def cache_identity(self) -> str:
        digest = hashlib.sha256(self._path.encode()).hexdigest()[:16]
        return f"file_{self.dim}_{digest}"

    def _encode_text(self, text: str) -> np.ndarray:
        try:
            return self._vectors[text]
        except KeyError:
            raise EncoderError(f"{self._path}: no embedding for key {text!r}") from None


class RemoteEncoder(TextEncoder):
    """HTTP backend for an external embedding service."""

    def __init__(self, url: str, dim: int, timeout: float = 10.0,
                 attempts: int = 3, retry_wait: float = 0.5):
        super().__init__(dim)
        self.url = url
        self.timeout = timeout
        self.attempts = attempts
        self.retry_wait = retry_wait
        self.trainable = False

    def cache_identity(self) -> str:
        digest = hashlib.sha256(self.url.encode()).hexdigest()[:16]
        return f"remote_{self.dim}_{digest}"

    def _encode_text(self, text: str) -> np.ndarray:
        import time

        import requests  # deferred: only the remote backend needs it

        last_error = None
        for attempt in range(self.attempts):
            try:
                resp = requests.post(
                    self.url, json={"texts": [text]}, timeout=self.timeout
                )
                if resp.status_code != 200:
                    raise EncoderError(f"HTTP {resp.status_code} from {self.url}")
                vectors = resp.json()["vectors"]
                return np.asarray(vectors[0], dtype=np.float64)
            except (EncoderError, requests.RequestException, KeyError, ValueError) as exc:
                last_error = exc
                log.warning("encode attempt %d/%d failed: %s",
                            attempt + 1, self.attempts, exc)
                if attempt + 1 < self.attempts:
                    time.sleep(self.retry_wait)
        raise EncoderError(
            f"remote encoder failed after {self.attempts} attempts: {last_error}"
        )


# -- precomputed embedding file layout ----------------------------------------
#
# magic "UKQV" | u32 dim | u32 count | count records of
#   (u32 key length | key utf-8 | dim * f32 little-endian)


def write_embedding_file(path: str, entries: dict[str, np.ndarray], dim: int) -> None:
    with open(path, "wb") as f:
        f.write(EMBED_FILE_MAGIC)
        f.write(struct.pack("<II", dim, len(entries)))
        for key, vec in entries.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (dim,):
                raise ValueError(f"entry {key!r} has shape {vec.shape}, expected ({dim},)")
            raw = key.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(vec.astype("<f4").tobytes())


def read_embedding_file(path: str) -> tuple[list[str], int, list[np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != EMBED_FILE_MAGIC:
            raise EncoderError(f"{path}: bad magic {magic!r}")
        dim, count = struct.unpack("<II", f.read(8))
        keys = []
        vectors = []
        for _ in range(count):
            (klen,) = struct.unpack("<I", f.read(4))
            keys.append(f.read(klen).decode("utf-8"))
            vectors.append(
                np.frombuffer(f.read(4 * dim), dtype="<f4").astype(np.float64)
            )
    return keys, dim, vectors
