"""Synthetic multilingual corpus.

Every toy language renders the same semantic sentences with its own disjoint
block of token ids, so a translation is a fixed offset and the language of
any non-special token is known exactly. Semantic sentences come from a
sparse first-order Markov chain, which gives a transformer something
learnable to predict.

Token id layout for ``L`` languages and ``S`` semantic ids::

    0 BOS | 1 EOS | 2 PAD | block 0: [3, 3+S) | block 1: [3+S, 3+2S) | ...
"""

import csv
import io
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ArgumentError, FormatError

BOS, EOS, PAD = 0, 1, 2
N_SPECIAL = 3


@dataclass(frozen=True)
class ToyLanguageSpec:
    num_languages: int = 3
    semantic_vocab_size: int = 64
    ctx: int = 32
    min_len: int = 4
    max_len: int = 24
    branching: int = 3
    chain_seed: int = 0
    central: int = 0

    def __post_init__(self):
        if self.num_languages < 2:
            raise ArgumentError("need at least two languages")
        if self.semantic_vocab_size < 2:
            raise ArgumentError("semantic vocabulary needs at least two ids")
        if not 1 <= self.min_len <= self.max_len <= self.ctx - 2:
            raise ArgumentError(
                f"sentence lengths [{self.min_len}, {self.max_len}] must fit ctx-2={self.ctx - 2}"
            )
        if not 1 <= self.branching <= self.semantic_vocab_size:
            raise ArgumentError("branching must be in [1, S]")
        if not 0 <= self.central < self.num_languages:
            raise ArgumentError("central language index out of range")

    @property
    def vocab_size(self):
        return N_SPECIAL + self.num_languages * self.semantic_vocab_size

    @property
    def languages(self):
        return tuple(f"l{i}" for i in range(self.num_languages))

    @property
    def central_id(self):
        return self.languages[self.central]

    @property
    def target_ids(self):
        return tuple(l for i, l in enumerate(self.languages) if i != self.central)

    def lang_index(self, lang):
        if isinstance(lang, (int, np.integer)):
            if not 0 <= lang < self.num_languages:
                raise ArgumentError(f"language index {lang} out of range")
            return int(lang)
        try:
            return self.languages.index(lang)
        except ValueError:
            raise ArgumentError(f"unknown language id {lang!r}") from None

    def block(self, lang):
        """Half-open token id range ``[lo, hi)`` of a language."""
        i = self.lang_index(lang)
        lo = N_SPECIAL + i * self.semantic_vocab_size
        return lo, lo + self.semantic_vocab_size

    @property
    def chain(self):
        return _build_chain(self.semantic_vocab_size, self.branching, self.chain_seed)


@dataclass(frozen=True)
class MarkovChain:
    initial: np.ndarray  # (S,)
    transition: np.ndarray  # (S, S), rows sum to 1


@lru_cache(maxsize=16)
def _build_chain(S, branching, seed):
    rng = np.random.default_rng([seed, 0xC4A1])
    initial = rng.dirichlet(np.full(S, 0.5))
    trans = np.zeros((S, S))
    for i in range(S):
        succ = rng.choice(S, size=branching, replace=False)
        trans[i, succ] = rng.dirichlet(np.ones(branching))
    initial.setflags(write=False)
    trans.setflags(write=False)
    return MarkovChain(initial, trans)


@dataclass
class ParallelPair:
    semantic: tuple
    target: str
    central: str
    target_tokens: list
    central_tokens: list


def gen_semantic(seed, count, spec=ToyLanguageSpec()):
    """``count`` semantic sentences (tuples of ids in ``[0, S)``), pure in ``seed``."""
    rng = np.random.default_rng(seed)
    chain = spec.chain
    init_cdf = np.cumsum(chain.initial)
    init_cdf[-1] = 1.0
    trans_cdf = np.cumsum(chain.transition, axis=1)
    trans_cdf[:, -1] = 1.0
    out = []
    for _ in range(count):
        n = int(rng.integers(spec.min_len, spec.max_len + 1))
        u = rng.random(n)
        s = [min(int(np.searchsorted(init_cdf, u[0], side="right")), spec.semantic_vocab_size - 1)]
        for k in range(1, n):
            nxt = int(np.searchsorted(trans_cdf[s[-1]], u[k], side="right"))
            s.append(min(nxt, spec.semantic_vocab_size - 1))
        out.append(tuple(s))
    return out


def render(sentence, lang, spec=ToyLanguageSpec()):
    """BOS + semantic ids shifted into ``lang``'s block + EOS."""
    lo, _ = spec.block(lang)
    S = spec.semantic_vocab_size
    toks = [BOS]
    for sid in sentence:
        if not 0 <= sid < S:
            raise ArgumentError(f"semantic id {sid} outside [0, {S})")
        toks.append(lo + int(sid))
    toks.append(EOS)
    return toks


def language_of(token, spec=ToyLanguageSpec()):
    """Index of the language block containing a non-special token."""
    token = int(token)
    if not N_SPECIAL <= token < spec.vocab_size:
        raise ArgumentError(f"token {token} is special or out of vocabulary")
    return (token - N_SPECIAL) // spec.semantic_vocab_size


def derender(tokens, spec=ToyLanguageSpec()):
    """Inverse of :func:`render`: returns ``(semantic tuple, language index)``."""
    body = [int(t) for t in tokens if int(t) not in (BOS, EOS, PAD)]
    langs = {language_of(t, spec) for t in body}
    if len(langs) > 1:
        raise ArgumentError(f"sequence mixes language blocks {sorted(langs)}")
    lang = langs.pop() if langs else None
    S = spec.semantic_vocab_size
    return tuple((t - N_SPECIAL) % S for t in body), lang


def _stream_seed(seed, *tags):
    return [int(seed) & 0xFFFFFFFF, *tags]


# stream tags keep the splits independent of one another
_PROBE, _MANIP, _PRETRAIN, _HELDOUT, _RETRIEVAL = 11, 12, 13, 14, 15


def build_probing_set(seed, spec=ToyLanguageSpec(), n_per_lang=300):
    """Non-parallel sentences: each language draws its own semantics.

    A sentence already used by an earlier language is skipped, so no two
    languages share a semantic sequence.
    """
    seen = set()
    out = {}
    for i, lang in enumerate(spec.languages):
        stream = _stream_seed(seed, _PROBE, i)
        count = 2 * n_per_lang
        while True:
            # gen_semantic is prefix-stable, so a longer draw extends the shorter one
            fresh = [s for s in dict.fromkeys(gen_semantic(stream, count, spec)) if s not in seen]
            if len(fresh) >= n_per_lang or count > 64 * max(n_per_lang, 1):
                break
            count *= 2
        if len(fresh) < n_per_lang:
            raise ArgumentError(f"cannot draw {n_per_lang} distinct sentences for {lang}; chain too small")
        fresh = fresh[:n_per_lang]
        seen.update(fresh)
        out[lang] = [render(s, i, spec) for s in fresh]
    return out


def build_manipulation_set(seed, spec=ToyLanguageSpec(), central=None, n_per_lang=200):
    """Parallel target/central pairs, ``n_per_lang`` per target language.

    Smaller ``n_per_lang`` yields a prefix of the larger set for the same seed.
    """
    c = spec.central if central is None else spec.lang_index(central)
    c_id = spec.languages[c]
    pairs = []
    for i, lang in enumerate(spec.languages):
        if i == c:
            continue
        for s in gen_semantic(_stream_seed(seed, _MANIP, i), n_per_lang, spec):
            pairs.append(ParallelPair(s, lang, c_id, render(s, i, spec), render(s, c, spec)))
    return pairs


def build_heldout_set(seed, spec=ToyLanguageSpec(), n=100):
    """Parallel held-out semantics rendered in every language (for evaluation)."""
    sems = gen_semantic(_stream_seed(seed, _HELDOUT), n, spec)
    return sems, {lang: [render(s, i, spec) for s in sems] for i, lang in enumerate(spec.languages)}


def build_retrieval_set(seed, spec=ToyLanguageSpec(), n=100, length=12):
    """Distinct parallel sentences of exactly ``length`` semantic ids.

    Equal lengths keep the position of the last token from identifying a
    translation on its own. Longer draws are truncated; duplicates skipped.
    """
    if not spec.min_len <= length <= spec.max_len:
        raise ArgumentError(f"retrieval length {length} outside [{spec.min_len}, {spec.max_len}]")
    count = 4 * n
    while True:
        sems = [s[:length] for s in gen_semantic(_stream_seed(seed, _RETRIEVAL), count, spec) if len(s) >= length]
        sems = list(dict.fromkeys(sems))
        if len(sems) >= n or count > 256 * max(n, 1):
            break
        count *= 2
    if len(sems) < n:
        raise ArgumentError(f"cannot draw {n} distinct sentences of length {length}")
    sems = sems[:n]
    return sems, {lang: [render(s, i, spec) for s in sems] for i, lang in enumerate(spec.languages)}


def render_switched(sentence, lang, spec, rng, hazard):
    """Render ``sentence`` in ``lang`` but switch to the central block for the
    rest of the sentence with probability ``hazard`` before each token after
    the first. The central language itself never switches."""
    i = spec.lang_index(lang)
    toks = render(sentence, i, spec)
    if i == spec.central or hazard <= 0:
        return toks
    shift = (spec.central - i) * spec.semantic_vocab_size
    u = rng.random(len(sentence))
    for k in range(1, len(sentence)):
        if u[k] < hazard:
            for j in range(k + 1, len(sentence) + 1):
                toks[j] += shift
            break
    return toks


def mixture_batches(seed, spec, ratios, batch_size, n_batches, switch_hazard=0.0):
    """Yield ``n_batches`` lists of rendered sentences whose language is drawn
    with probabilities ``ratios`` (one weight per language). Target-language
    sentences code-switch into the central language with per-token
    probability ``switch_hazard``."""
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (spec.num_languages,) or np.any(ratios < 0):
        raise ArgumentError("need one non-negative mixture weight per language")
    if abs(ratios.sum() - 1.0) > 1e-9:
        raise ArgumentError(f"mixture ratios must sum to 1, got {ratios.sum()}")
    if not 0.0 <= switch_hazard <= 1.0:
        raise ArgumentError("switch_hazard must be in [0, 1]")
    rng = np.random.default_rng(_stream_seed(seed, _PRETRAIN))
    for b in range(n_batches):
        langs = rng.choice(spec.num_languages, size=batch_size, p=ratios)
        sems = gen_semantic(_stream_seed(seed, _PRETRAIN, b), batch_size, spec)
        yield [render_switched(s, int(l), spec, rng, switch_hazard) for s, l in zip(sems, langs)]


def pad_batch(seqs, length=None):
    """Right-pad token lists with PAD into an int array."""
    length = max(len(s) for s in seqs) if length is None else length
    out = np.full((len(seqs), length), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


# ----------------------------------------------------------------------------
# Embedding dumps (real-model hidden states for probing)

MAGIC = b"LENSEMB1"
VERSION = 1
_HEADER = struct.Struct("<8sIIII")


@dataclass
class EmbeddingDump:
    d: int
    languages: list
    lang_index: np.ndarray  # (n,) uint16
    vectors: np.ndarray  # (n, d) float32
    source: str = field(default="memory", compare=False)

    def __post_init__(self):
        self.lang_index = np.asarray(self.lang_index, dtype=np.uint16).reshape(-1)
        self.vectors = np.asarray(self.vectors, dtype=np.float32).reshape(-1, self.d)
        if self.vectors.shape[0] != self.lang_index.shape[0]:
            raise ArgumentError("one language index per vector required")
        if not np.all(np.isfinite(self.vectors)):
            raise ArgumentError("dump vectors must be finite")
        if self.lang_index.size and int(self.lang_index.max()) >= len(self.languages):
            raise ArgumentError("language index outside language table")

    def by_language(self):
        """Map language id -> ``(n_l, d)`` float64 array, in table order."""
        return {
            lang: self.vectors[self.lang_index == i].astype(np.float64)
            for i, lang in enumerate(self.languages)
        }

    def __eq__(self, other):
        return (
            isinstance(other, EmbeddingDump)
            and self.d == other.d
            and list(self.languages) == list(other.languages)
            and np.array_equal(self.lang_index, other.lang_index)
            and np.array_equal(self.vectors, other.vectors)
        )


def encode_embedding_dump(dump):
    parts = [_HEADER.pack(MAGIC, VERSION, dump.d, len(dump.languages), dump.lang_index.size)]
    for lang in dump.languages:
        raw = str(lang).encode("utf-8")
        if len(raw) > 255:
            raise ArgumentError(f"language id {lang!r} longer than 255 bytes")
        parts.append(struct.pack("<B", len(raw)) + raw)
    rec = np.dtype([("lang", "<u2"), ("vec", "<f4", (dump.d,))])
    body = np.empty(dump.lang_index.size, dtype=rec)
    body["lang"] = dump.lang_index
    body["vec"] = dump.vectors
    parts.append(body.tobytes())
    return b"".join(parts)


def decode_embedding_dump(buf, source="memory"):
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", offset=len(buf))
    magic, version, d, n_lang, n = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", offset=0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=8)
    pos = _HEADER.size
    langs = []
    for _ in range(n_lang):
        if pos >= len(buf):
            raise FormatError("truncated language table", offset=pos)
        k = buf[pos]
        if pos + 1 + k > len(buf):
            raise FormatError("truncated language id", offset=pos)
        try:
            langs.append(buf[pos + 1 : pos + 1 + k].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError("language id is not UTF-8", offset=pos + 1) from exc
        pos += 1 + k
    rec = np.dtype([("lang", "<u2"), ("vec", "<f4", (d,))])
    need = n * rec.itemsize
    if len(buf) - pos < need:
        raise FormatError(f"truncated payload: need {need} bytes, have {len(buf) - pos}", offset=pos)
    if len(buf) - pos > need:
        raise FormatError("trailing bytes after payload", offset=pos + need)
    body = np.frombuffer(buf, dtype=rec, count=n, offset=pos)
    vecs = body["vec"].reshape(n, d)
    bad = ~np.isfinite(vecs)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise FormatError("non-finite value", offset=pos + int(i) * rec.itemsize + 2 + 4 * int(j))
    idx = body["lang"]
    if n and int(idx.max()) >= n_lang:
        i = int(np.argmax(idx >= n_lang))
        raise FormatError("language index outside table", offset=pos + i * rec.itemsize)
    return EmbeddingDump(d, langs, idx.copy(), vecs.copy(), source=source)


def _read_csv_dump(text, source):
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if not header or header[0] != "lang" or header[1:] != [f"v{i}" for i in range(len(header) - 1)]:
        raise FormatError("CSV header must be lang,v0,...,v{d-1}", offset=0)
    d = len(header) - 1
    langs, idx, vecs = [], [], []
    for row in reader:
        if not row:
            continue
        if len(row) != d + 1:
            raise FormatError(f"CSV row {reader.line_num} has {len(row) - 1} values, expected {d}")
        if row[0] not in langs:
            langs.append(row[0])
        idx.append(langs.index(row[0]))
        try:
            vec = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise FormatError(f"CSV row {reader.line_num}: {exc}") from exc
        if not all(np.isfinite(vec)):
            raise FormatError(f"CSV row {reader.line_num} has non-finite values")
        vecs.append(vec)
    return EmbeddingDump(d, langs, np.array(idx, dtype=np.uint16), np.array(vecs, dtype=np.float32).reshape(-1, d), source=source)


def read_embedding_dump(path):
    """Load a binary (``LENSEMB1``) or CSV (``lang,v0,...``) embedding dump."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf.startswith(MAGIC[:4]) or not buf.startswith(b"lang"):
        return decode_embedding_dump(buf, source=str(path))
    return _read_csv_dump(buf.decode("utf-8"), source=str(path))


def write_embedding_dump(dump, path):
    with open(path, "wb") as fh:
        fh.write(encode_embedding_dump(dump))
