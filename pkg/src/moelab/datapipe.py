"""Sequence packing for pretraining: sequential packing, the random sequential
document buffer (RSDB), the BatchHet metric and a synthetic lognormal corpus."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy import stats as sps


class EndOfData(Exception):
    pass


class MetricError(ValueError):
    pass


@dataclass
class Document:
    tokens: np.ndarray
    domain: int = 0
    doc_id: int = 0

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1 or self.tokens.size == 0:
            raise ValueError("documents need a nonempty 1-D token list")

    @property
    def length(self) -> int:
        return int(self.tokens.size)


@dataclass
class Span:
    doc_id: int
    domain: int
    start: int  # position in the sequence buffer
    end: int
    doc_offset: int  # position in the source document


@dataclass
class SequenceBuffer:
    tokens: np.ndarray
    spans: list[Span]

    def doc_ids(self) -> np.ndarray:
        out = np.empty(self.tokens.size, dtype=np.int64)
        for s in self.spans:
            out[s.start : s.end] = s.doc_id
        return out

    def domains(self) -> np.ndarray:
        out = np.empty(self.tokens.size, dtype=np.int64)
        for s in self.spans:
            out[s.start : s.end] = s.domain
        return out


class _Filler:
    def __init__(self, seq_len: int):
        self.seq_len = seq_len
        self.reset()

    def reset(self):
        self.buf = np.empty(self.seq_len, dtype=np.int64)
        self.spans: list[Span] = []
        self.pos = 0

    def copy_from(self, doc: Document, head: int) -> int:
        """Copy from ``doc`` at ``head`` until the buffer or the document ends; return tokens copied."""
        n = min(self.seq_len - self.pos, doc.length - head)
        self.buf[self.pos : self.pos + n] = doc.tokens[head : head + n]
        self.spans.append(Span(doc.doc_id, doc.domain, self.pos, self.pos + n, head))
        self.pos += n
        return n

    @property
    def full(self) -> bool:
        return self.pos == self.seq_len

    def emit(self) -> SequenceBuffer:
        out = SequenceBuffer(self.buf, self.spans)
        self.reset()
        return out


# ---------------------------------------------------------------- sequential packing


def sequential_pack(stream: Iterable[Document], seq_len: int) -> Iterator[SequenceBuffer]:
    """Concatenate documents in arrival order; a final partial buffer is withheld."""
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    fill = _Filler(seq_len)
    for doc in stream:
        head = 0
        while head < doc.length:
            head += fill.copy_from(doc, head)
            if fill.full:
                yield fill.emit()


# ---------------------------------------------------------------- RSDB


class Rsdb:
    """Random sequential document buffer.

    Holds up to ``2 * user_capacity`` partially read documents. Sequences are
    filled by repeatedly picking a resident document uniformly at random and
    copying from its read head until the sequence or the document ends.
    Finished documents are evicted at once; after each emitted sequence the
    buffer is topped back up to its internal capacity whenever it has dropped
    to ``user_capacity`` or below.
    """

    def __init__(self, source: Iterable[Document], user_capacity: int, seed: int | np.random.Generator):
        if user_capacity < 1:
            raise ValueError("user_capacity must be >= 1")
        self.source = iter(source)
        self.user_capacity = user_capacity
        self.internal_capacity = 2 * user_capacity
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.docs: list[Document] = []
        self.heads: list[int] = []
        self.exhausted = False
        self._load()

    def __len__(self) -> int:
        return len(self.docs)

    def refill(self) -> "Rsdb":
        """Load documents until the internal capacity is reached or the source ends."""
        self._load()
        if not self.docs:
            raise EndOfData("document source and buffer are both exhausted")
        return self

    def _load(self) -> None:
        while len(self.docs) < self.internal_capacity and not self.exhausted:
            try:
                doc = next(self.source)
            except StopIteration:
                self.exhausted = True
                break
            self.docs.append(doc)
            self.heads.append(0)

    def _evict(self, i: int) -> None:
        last = len(self.docs) - 1
        self.docs[i], self.heads[i] = self.docs[last], self.heads[last]
        self.docs.pop()
        self.heads.pop()

    def next_sequence(self, seq_len: int) -> SequenceBuffer:
        fill = _Filler(seq_len)
        while not fill.full:
            if not self.docs:
                self.refill()  # raises EndOfData when nothing is left
            i = int(self.rng.integers(len(self.docs)))
            doc, head = self.docs[i], self.heads[i]
            head += fill.copy_from(doc, head)
            if head >= doc.length:
                self._evict(i)
            else:
                self.heads[i] = head
        if len(self.docs) <= self.user_capacity:
            self._load()
        return fill.emit()

    def sequences(self, seq_len: int) -> Iterator[SequenceBuffer]:
        while True:
            try:
                yield self.next_sequence(seq_len)
            except EndOfData:
                return


class ShardedRsdb:
    """``workers`` RSDBs that split one total capacity; documents are dealt round-robin."""

    def __init__(self, source: Iterable[Document], user_capacity: int, workers: int, seed: int):
        if user_capacity % workers:
            raise ValueError("user_capacity must split evenly across workers")
        src = iter(source)
        self._queues: list[list[Document]] = [[] for _ in range(workers)]
        self._src = src
        self._turn = 0
        seeds = np.random.SeedSequence(seed).spawn(workers)
        self.shards = [
            Rsdb(self._feed(w), user_capacity // workers, np.random.default_rng(seeds[w]))
            for w in range(workers)
        ]

    def _feed(self, worker: int) -> Iterator[Document]:
        q = self._queues[worker]
        while True:
            while not q:
                try:
                    doc = next(self._src)
                except StopIteration:
                    return
                self._queues[self._turn].append(doc)
                self._turn = (self._turn + 1) % len(self._queues)
            yield q.pop(0)

    @property
    def total_internal_capacity(self) -> int:
        return sum(s.internal_capacity for s in self.shards)

    def sequences(self, seq_len: int) -> Iterator[SequenceBuffer]:
        live = [s.sequences(seq_len) for s in self.shards]
        while live:
            for it in list(live):
                try:
                    yield next(it)
                except StopIteration:
                    live.remove(it)


# ---------------------------------------------------------------- metrics


def batch_het(losses: Sequence[float]) -> float:
    """Max microbatch loss minus mean microbatch loss."""
    arr = np.asarray(losses, dtype=np.float64)
    if arr.size == 0:
        raise MetricError("BatchHet needs at least one microbatch loss")
    return float(arr.max() - arr.mean())


# ---------------------------------------------------------------- synthetic corpus


@dataclass
class CorpusParams:
    count: int | None = None  # None: endless stream
    length_mu: float = 6.0
    length_sigma: float = 1.0
    domain_weights: tuple[float, ...] = (0.8, 0.2)
    band_size: int = 256
    zipf_exponent: float = 1.1
    seed: int = 0

    def __post_init__(self):
        self.domain_weights = tuple(float(w) for w in self.domain_weights)
        if self.length_sigma < 0 or self.band_size < 1 or self.zipf_exponent < 0:
            raise ValueError("corpus parameters must be non-negative with a positive band size")
        if not self.domain_weights or min(self.domain_weights) < 0 or sum(self.domain_weights) <= 0:
            raise ValueError("domain weights must be non-negative and not all zero")

    @property
    def vocab_size(self) -> int:
        return self.band_size * len(self.domain_weights)

    def domain_probs(self) -> np.ndarray:
        w = np.asarray(self.domain_weights)
        return w / w.sum()

    def band_distribution(self) -> np.ndarray:
        """Zipfian token distribution within one domain's vocabulary band."""
        p = 1.0 / np.arange(1, self.band_size + 1) ** self.zipf_exponent
        return p / p.sum()

    def reference_distribution(self) -> np.ndarray:
        """Corpus-wide unigram distribution: domain mixture over disjoint bands."""
        band = self.band_distribution()
        return np.concatenate([w * band for w in self.domain_probs()])


def synth_corpus(params: CorpusParams | None = None, **overrides) -> Iterator[Document]:
    """Lognormal-length documents whose tokens come from per-domain disjoint vocabulary bands."""
    if params is None:
        params = CorpusParams(**overrides)
    rng = np.random.default_rng(params.seed)
    cdf = np.cumsum(params.band_distribution())
    cdf[-1] = 1.0
    probs = params.domain_probs()
    i = 0
    while params.count is None or i < params.count:
        n = max(1, int(round(math.exp(params.length_mu + params.length_sigma * rng.standard_normal()))))
        dom = int(rng.choice(len(probs), p=probs))
        toks = np.searchsorted(cdf, rng.random(n), side="right") + dom * params.band_size
        yield Document(np.minimum(toks, (dom + 1) * params.band_size - 1), dom, i)
        i += 1


def write_corpus(docs: Iterable[Document], path: str | Path) -> int:
    n = 0
    with Path(path).open("w") as fh:
        for d in docs:
            fh.write(json.dumps({"tokens": d.tokens.tolist(), "domain": d.domain}) + "\n")
            n += 1
    return n


def read_corpus(path: str | Path) -> Iterator[Document]:
    with Path(path).open() as fh:
        for i, line in enumerate(fh):
            if line.strip():
                rec = json.loads(line)
                yield Document(rec["tokens"], int(rec.get("domain", 0)), i)


# ---------------------------------------------------------------- packing comparison


@dataclass
class PackingBenchConfig:
    corpus: CorpusParams = field(default_factory=CorpusParams)
    seq_len: int = 1024
    microbatches: int = 8
    seqs_per_microbatch: int = 4
    steps: int = 2000
    rsdb_capacity: int = 4096
    packers: tuple[str, ...] = ("sequential", "rsdb")
    seed: int = 0
    bootstrap: int = 2000


@dataclass
class BatchReport:
    packer: str
    losses: np.ndarray  # [steps, microbatches]
    batch_het: np.ndarray  # [steps]
    domain_hist: np.ndarray  # [steps, microbatches, domains]

    @property
    def max_loss(self) -> np.ndarray:
        return self.losses.max(axis=1)

    @property
    def mean_loss(self) -> np.ndarray:
        return self.losses.mean(axis=1)


def _packer_stream(name: str, cfg: PackingBenchConfig) -> Iterator[SequenceBuffer]:
    docs = synth_corpus(cfg.corpus)
    if name == "sequential":
        return sequential_pack(docs, cfg.seq_len)
    if name == "rsdb":
        return Rsdb(docs, cfg.rsdb_capacity, cfg.seed).sequences(cfg.seq_len)
    raise ValueError(f"unknown packer {name!r}")


def domain_cross_entropy(params: CorpusParams) -> np.ndarray:
    """Cross-entropy of each domain's unigram distribution under the corpus-wide reference."""
    ref = params.reference_distribution()
    band = params.band_distribution()
    n = params.band_size
    return np.array([
        -(band * np.log(ref[d * n : (d + 1) * n])).sum() for d in range(len(params.domain_weights))
    ])


def run_packer(name: str, cfg: PackingBenchConfig) -> BatchReport:
    """Per-step microbatch proxy losses for one packer.

    A microbatch's proxy loss is the token-weighted mean of the per-domain
    cross-entropies, so it moves only with the microbatch's domain mix.
    """
    dom_ce = domain_cross_entropy(cfg.corpus)
    n_dom = len(cfg.corpus.domain_weights)
    band = cfg.corpus.band_size
    stream = _packer_stream(name, cfg)
    m, s = cfg.microbatches, cfg.seqs_per_microbatch
    hist = np.zeros((cfg.steps, m, n_dom), dtype=np.int64)
    for step in range(cfg.steps):
        for mb in range(m):
            for _ in range(s):
                try:
                    seq = next(stream)
                except StopIteration:
                    raise EndOfData(f"{name}: corpus ran out at step {step}") from None
                hist[step, mb] += np.bincount(seq.tokens // band, minlength=n_dom)
    losses = (hist * dom_ce).sum(axis=-1) / hist.sum(axis=-1)
    het = losses.max(axis=1) - losses.mean(axis=1)
    return BatchReport(name, losses, het, hist)


def _bootstrap_ratio(a: np.ndarray, b: np.ndarray, n: int, seed: int) -> tuple[float, float]:
    if not b.any():
        return float("nan"), float("nan")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, a.size, size=(n, a.size))
    # a resample of all-zero baseline steps has no defined ratio
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = a[idx].mean(axis=1) / b[idx].mean(axis=1)
    ratios = ratios[np.isfinite(ratios)]
    lo, hi = np.percentile(ratios, [2.5, 97.5])
    return float(lo), float(hi)


def packing_comparison(cfg: PackingBenchConfig) -> tuple[dict[str, BatchReport], dict]:
    """Run each packer on identically seeded corpora and summarize BatchHet."""
    reports = {name: run_packer(name, cfg) for name in cfg.packers}
    summary: dict = {"steps": cfg.steps, "packers": list(cfg.packers)}
    for name, r in reports.items():
        summary[name] = {
            "mean_batch_het": float(r.batch_het.mean()),
            "kurtosis_batch_het": float(sps.kurtosis(r.batch_het, fisher=False)),
            "mean_loss": float(r.mean_loss.mean()),
        }
    if "sequential" in reports and "rsdb" in reports:
        seq, rs = reports["sequential"].batch_het, reports["rsdb"].batch_het
        lo, hi = _bootstrap_ratio(rs, seq, cfg.bootstrap, cfg.seed)
        summary["ratio"] = float(rs.mean() / seq.mean()) if seq.mean() > 0 else float("nan")
        summary["ratio_ci95"] = [lo, hi]
        summary["frac_steps_rsdb_lower"] = float(np.mean(rs < seq))
        summary["reduction"] = 1.0 - summary["ratio"]
    return reports, summary


def write_bench(reports: dict[str, BatchReport], summary: dict, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "batch_het.csv").open("w") as fh:
        fh.write("step,packer,batch_het,max_loss,mean_loss\n")
        for name, r in reports.items():
            for step in range(r.batch_het.size):
                fh.write(
                    f"{step},{name},{float(r.batch_het[step])!r},{float(r.max_loss[step])!r},{float(r.mean_loss[step])!r}\n"
                )
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
