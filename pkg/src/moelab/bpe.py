"""Byte-level BPE: training, encoding, truncation and compression metrics.

Token ids 0..255 are the raw bytes, merge ``r`` produces id ``256 + r`` and
special tokens follow the merges. Merges never cross pretoken boundaries.

Model files are JSON lines::

    {"format": "moelab-bpe", "version": 1, "vocab_size": V, "num_merges": M, "num_special": S}
    {"rank": 0, "left": "61", "right": "61"}          # hex-encoded byte strings
    ...
    {"special": "<|endoftext|>", "id": 300}
"""

from __future__ import annotations

import heapq
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .pretokenizer import iter_pretokens, pretoken_bytes, pretokenize

FORMAT_NAME = "moelab-bpe"
FORMAT_VERSION = 1


class BpeTrainingError(ValueError):
    pass


class MetricError(ValueError):
    pass


class ModelFileError(ValueError):
    pass


@dataclass
class BpeModel:
    merges: list[tuple[bytes, bytes]]
    special_tokens: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.vocab: list[bytes] = [bytes([b]) for b in range(256)]
        self.vocab.extend(a + b for a, b in self.merges)
        self.ranks = {m: r for r, m in enumerate(self.merges)}
        self.token_ids = {tok: i for i, tok in enumerate(self.vocab)}
        self._cache: dict[bytes, tuple[int, ...]] = {}

    @property
    def vocab_size(self) -> int:
        return 256 + len(self.merges) + len(self.special_tokens)

    def special_id(self, token: str) -> int:
        return 256 + len(self.merges) + self.special_tokens.index(token)

    def truncate(self, vocab_size: int) -> "BpeModel":
        """Keep the lowest-ranked merges so the vocabulary has ``vocab_size`` entries."""
        keep = vocab_size - 256 - len(self.special_tokens)
        if keep < 0 or keep > len(self.merges):
            raise ValueError(
                f"cannot truncate a {self.vocab_size}-token model to {vocab_size}"
            )
        return BpeModel(self.merges[:keep], list(self.special_tokens))

    def encode_pretoken(self, piece: bytes) -> tuple[int, ...]:
        hit = self._cache.get(piece)
        if hit is not None:
            return hit
        parts = [bytes([b]) for b in piece]
        ranks = self.ranks
        while len(parts) > 1:
            best = None
            best_rank = None
            for pair in zip(parts, parts[1:]):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            merged = []
            i = 0
            while i < len(parts):
                if i + 1 < len(parts) and parts[i] == best[0] and parts[i + 1] == best[1]:
                    merged.append(best[0] + best[1])
                    i += 2
                else:
                    merged.append(parts[i])
                    i += 1
            parts = merged
        ids = tuple(self.token_ids[p] for p in parts)
        if len(self._cache) < 1_000_000:
            self._cache[piece] = ids
        return ids


def encode(model: BpeModel, text: str | bytes) -> list[int]:
    out: list[int] = []
    for tok in iter_pretokens(text):
        out.extend(model.encode_pretoken(pretoken_bytes(tok)))
    return out


def decode_bytes(model: BpeModel, ids: Iterable[int]) -> bytes:
    n_plain = 256 + len(model.merges)
    chunks = []
    for i in ids:
        if i < n_plain:
            chunks.append(model.vocab[i])
        else:
            chunks.append(model.special_tokens[i - n_plain].encode("utf-8"))
    return b"".join(chunks)


def decode(model: BpeModel, ids: Iterable[int]) -> str:
    return decode_bytes(model, ids).decode("utf-8", errors="surrogateescape")


# ---------------------------------------------------------------- training


def _count_pretokens(corpus: Iterable[str | bytes]) -> Counter:
    counts: Counter = Counter()
    n_docs = 0
    for doc in corpus:
        n_docs += 1
        counts.update(pretoken_bytes(t) for t in pretokenize(doc))
    if n_docs == 0 or not counts:
        raise BpeTrainingError("cannot train BPE on an empty corpus")
    return counts


def train_bpe(
    corpus: Iterable[str | bytes],
    vocab_size: int,
    special_tokens: Iterable[str] = (),
) -> BpeModel:
    """Greedy most-frequent-pair merging over pretoken byte sequences.

    Ties between equally frequent pairs go to the lexicographically smallest
    ``(left, right)`` byte pair, so training is deterministic.
    """
    special_tokens = list(special_tokens)
    n_merges = vocab_size - 256 - len(special_tokens)
    if n_merges < 0:
        raise BpeTrainingError(
            f"vocab_size {vocab_size} is below 256 bytes + {len(special_tokens)} specials"
        )
    counts = _count_pretokens(corpus)

    words: list[list[bytes]] = []
    freqs: list[int] = []
    for piece, c in counts.items():
        words.append([bytes([b]) for b in piece])
        freqs.append(c)

    pair_counts: dict[tuple[bytes, bytes], int] = defaultdict(int)
    where: dict[tuple[bytes, bytes], set[int]] = defaultdict(set)
    for wi, w in enumerate(words):
        f = freqs[wi]
        for pair in zip(w, w[1:]):
            pair_counts[pair] += f
            where[pair].add(wi)

    heap = [(-c, p) for p, c in pair_counts.items()]
    heapq.heapify(heap)

    merges: list[tuple[bytes, bytes]] = []
    while len(merges) < n_merges and heap:
        negc, pair = heapq.heappop(heap)
        cur = pair_counts.get(pair, 0)
        if cur <= 0:
            continue
        if -negc != cur:
            heapq.heappush(heap, (-cur, pair))
            continue
        merges.append(pair)
        a, b = pair
        new_tok = a + b
        touched: dict[tuple[bytes, bytes], None] = {}
        for wi in list(where.pop(pair, ())):
            w = words[wi]
            f = freqs[wi]
            for p in zip(w, w[1:]):
                pair_counts[p] -= f
                touched[p] = None
            merged = []
            i = 0
            while i < len(w):
                if i + 1 < len(w) and w[i] == a and w[i + 1] == b:
                    merged.append(new_tok)
                    i += 2
                else:
                    merged.append(w[i])
                    i += 1
            words[wi] = merged
            for p in zip(merged, merged[1:]):
                pair_counts[p] += f
                where[p].add(wi)
                touched[p] = None
        pair_counts.pop(pair, None)
        for p in touched:
            c = pair_counts.get(p, 0)
            if c > 0:
                heapq.heappush(heap, (-c, p))
            else:
                pair_counts.pop(p, None)
                where.pop(p, None)
    return BpeModel(merges, special_tokens)


# ---------------------------------------------------------------- metrics


def efficiency_metrics(model: BpeModel, corpus: Iterable[str | bytes]) -> dict[str, float]:
    """Bytes-per-token and characters-per-token over a corpus."""
    n_bytes = n_chars = n_tokens = 0
    n_docs = 0
    for doc in corpus:
        n_docs += 1
        raw = doc if isinstance(doc, (bytes, bytearray)) else doc.encode("utf-8", errors="surrogateescape")
        text = bytes(raw).decode("utf-8", errors="surrogateescape")
        n_bytes += len(raw)
        n_chars += len(text)
        n_tokens += len(encode(model, text))
    if n_docs == 0:
        raise MetricError("efficiency metrics need a nonempty corpus")
    if n_tokens == 0:
        raise MetricError("corpus produced zero tokens")
    return {
        "bytes_per_token": n_bytes / n_tokens,
        "chars_per_token": n_chars / n_tokens,
        "tokens": n_tokens,
        "bytes": n_bytes,
        "chars": n_chars,
    }


# ---------------------------------------------------------------- persistence


def save_model(model: BpeModel, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        header = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "vocab_size": model.vocab_size,
            "num_merges": len(model.merges),
            "num_special": len(model.special_tokens),
        }
        fh.write(json.dumps(header) + "\n")
        for r, (a, b) in enumerate(model.merges):
            fh.write(json.dumps({"rank": r, "left": a.hex(), "right": b.hex()}) + "\n")
        for s in model.special_tokens:
            fh.write(json.dumps({"special": s, "id": model.special_id(s)}) + "\n")


def load_model(path: str | Path) -> BpeModel:
    try:
        return _parse_model(Path(path).read_text(encoding="utf-8").splitlines(), path)
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, ModelFileError):
            raise
        raise ModelFileError(f"{path}: malformed model file: {exc}") from None


def _parse_model(lines: list[str], path) -> BpeModel:
    if not lines:
        raise ModelFileError(f"{path}: empty model file")
    header = json.loads(lines[0])
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME or header.get("version") != FORMAT_VERSION:
        raise ModelFileError(f"{path}: unsupported header {header}")
    n_m, n_s = header["num_merges"], header["num_special"]
    body = [json.loads(line) for line in lines[1:] if line.strip()]
    if len(body) != n_m + n_s:
        raise ModelFileError(f"{path}: expected {n_m + n_s} records, found {len(body)}")
    merges = []
    for r, rec in enumerate(body[:n_m]):
        if rec.get("rank") != r:
            raise ModelFileError(f"{path}: merge record {r} out of order")
        merges.append((bytes.fromhex(rec["left"]), bytes.fromhex(rec["right"])))
    specials = [rec["special"] for rec in body[n_m:]]
    model = BpeModel(merges, specials)
    if model.vocab_size != header["vocab_size"]:
        raise ModelFileError(f"{path}: vocab_size mismatch")
    return model
