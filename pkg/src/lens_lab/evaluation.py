"""Toy-scale metrics: language fidelity, next-token accuracy, cross-lingual
retrieval, central-language drift and PCA exports of projected representations."""

import csv
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import corpus, numerics
from .corpus import EOS, N_SPECIAL, PAD
from .errors import ArgumentError

log = logging.getLogger(__name__)


@dataclass
class EvalConfig:
    prompt_len: int = 4  # tokens, BOS included
    max_new: int = 16
    n_eval: int = 100
    seed: int = 1234
    layers: tuple = ()
    retrieval_len: int = 12  # semantic ids per retrieval sentence

    def __post_init__(self):
        if self.prompt_len < 1 or self.max_new < 1 or self.n_eval < 1 or self.retrieval_len < 1:
            raise ArgumentError("prompt_len, max_new, n_eval and retrieval_len must be >= 1")
        self.layers = tuple(self.layers)


@dataclass
class EvalReport:
    fidelity: dict
    token_fraction: dict
    empty_responses: dict
    next_token_accuracy: dict
    retrieval: dict  # target -> {layer: accuracy}
    central_drift: dict  # layer -> mean distance
    pca: list = field(default_factory=list)

    def to_json(self):
        def keys(d):
            return {str(k): keys(v) if isinstance(v, dict) else v for k, v in d.items()}

        doc = asdict(self)
        doc.pop("pca")
        return json.dumps(keys(doc), indent=1, sort_keys=True)


def as_prompt(tokens):
    """Drop a trailing EOS so the last position is a content token."""
    tokens = list(tokens)
    return tokens[:-1] if tokens and tokens[-1] == EOS else tokens


def response_in_language(tokens, lang, spec):
    """Strict majority of the non-special tokens lie in ``lang``'s block.

    Ties and responses without any non-special token count as out-of-language.
    """
    lo, hi = spec.block(lang)
    body = [t for t in tokens if t >= N_SPECIAL]
    if not body:
        return False
    inside = sum(lo <= t < hi for t in body)
    return 2 * inside > len(body)


def language_fidelity(generator, lang, prompts, spec, max_new=16):
    """Fraction of greedy responses to ``prompts`` that are in ``lang``.

    ``generator`` is anything with ``generate_batch(prompts, max_new)``.
    Returns ``(fidelity, token_fraction, n_empty)``; the token-level fraction
    is a diagnostic only.
    """
    if not prompts:
        raise ArgumentError("no prompts given")
    lo, hi = spec.block(lang)
    responses = generator.generate_batch([list(p) for p in prompts], max_new)
    hits, in_tok, all_tok, empty = 0, 0, 0, 0
    for resp in responses:
        body = [t for t in resp if t >= N_SPECIAL]
        if not body:
            empty += 1
        hits += response_in_language(resp, lang, spec)
        in_tok += sum(lo <= t < hi for t in body)
        all_tok += len(body)
    if empty:
        log.info("%d of %d responses in %s were empty", empty, len(responses), lang)
    return hits / len(responses), (in_tok / all_tok if all_tok else 0.0), empty


def next_token_accuracy(model, seqs):
    """Teacher-forced argmax accuracy over non-PAD targets."""
    tokens = corpus.pad_batch(seqs)
    logits = model.forward(tokens).logits[:, :-1]
    targets = tokens[:, 1:]
    valid = targets != PAD
    return float(((logits.argmax(-1) == targets) & valid).sum() / valid.sum())


def agnostic_complement(sub, x):
    """``(I - P_s) x``: representations with the language-specific part removed."""
    x = np.asarray(x, dtype=np.float64)
    return x - (x @ sub.m_s) @ sub.m_s.T


def retrieval_accuracy(target_reps, central_reps, sub):
    """Nearest-central-neighbour accuracy (cosine, language-specific part removed).

    Row ``i`` of ``target_reps`` is the translation of row ``i`` of
    ``central_reps``. Pairs whose projection has zero norm are skipped.
    """
    a = agnostic_complement(sub, target_reps)
    b = agnostic_complement(sub, central_reps)
    if a.shape != b.shape:
        raise ArgumentError("target and central reps must be parallel")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    keep = (na > 0) & (nb > 0)
    if not keep.all():
        warnings.warn(f"skipping {int((~keep).sum())} pairs with zero-norm projections", stacklevel=2)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return 0.0
    a = a[idx] / na[idx, None]
    b = b[idx] / nb[idx, None]
    sim = a @ b.T
    return float(np.mean(sim.argmax(axis=1) == np.arange(idx.size)))


def central_drift(model, reference, seqs, layers):
    """Mean Euclidean distance between live and reference last-token states."""
    prompts = [as_prompt(s) for s in seqs]
    live = model.last_token_reps(prompts, layers)
    ref = reference.reps(prompts, layers)
    return {
        l: float(np.mean(np.linalg.norm(live[l].astype(np.float64) - ref[l].astype(np.float64), axis=1)))
        for l in layers
    }


def project(sub, x, which):
    x = np.asarray(x, dtype=np.float64)
    if which == "agnostic":
        return np.multiply.outer(x @ sub.u_a, sub.u_a)
    if which == "specific":
        return (x @ sub.m_s) @ sub.m_s.T
    raise ArgumentError(f"subspace must be 'agnostic' or 'specific', got {which!r}")


def export_pca(model, inputs, sub, which, layer=None):
    """PCA rows ``(lang, sample_id, pc1, pc2, subspace, layer)`` for projected reps.

    ``inputs`` maps language -> token sequences (parallel across languages).
    """
    layer = sub.layer if layer is None else layer
    langs, ids, reps = [], [], []
    for lang, seqs in inputs.items():
        x = model.last_token_reps([as_prompt(s) for s in seqs], [layer])[layer]
        reps.append(project(sub, x, which))
        langs += [lang] * len(seqs)
        ids += list(range(len(seqs)))
    coords = numerics.pca_2d(np.concatenate(reps))
    return [
        {"lang": l, "sample_id": i, "pc1": float(c[0]), "pc2": float(c[1]), "subspace": which, "layer": layer}
        for l, i, c in zip(langs, ids, coords)
    ]


PCA_FIELDS = ["lang", "sample_id", "pc1", "pc2", "subspace", "layer"]


def write_pca_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=PCA_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def centroid_separation(rows):
    """Mean pairwise distance between per-language centroids of PCA rows."""
    by_lang = {}
    for r in rows:
        by_lang.setdefault(r["lang"], []).append((r["pc1"], r["pc2"]))
    cents = [np.mean(v, axis=0) for v in by_lang.values()]
    dists = [np.linalg.norm(a - b) for i, a in enumerate(cents) for b in cents[i + 1 :]]
    return float(np.mean(dists)) if dists else 0.0


def eval_sets(spec, cfg):
    """Held-out parallel sentences and prompts of ``cfg.prompt_len`` tokens."""
    _, held = corpus.build_heldout_set(cfg.seed, spec, cfg.n_eval)
    prompts = {lang: [s[: cfg.prompt_len] for s in seqs] for lang, seqs in held.items()}
    return held, prompts


def evaluate(model, reference, spec, subspaces, cfg=EvalConfig()):
    """Full metric suite for one model against its reference snapshot."""
    held, prompts = eval_sets(spec, cfg)
    layers = list(cfg.layers) or sorted(subspaces)
    fid, frac, empty, nta = {}, {}, {}, {}
    for lang in spec.languages:
        fid[lang], frac[lang], empty[lang] = language_fidelity(model, lang, prompts[lang], spec, cfg.max_new)
        nta[lang] = next_token_accuracy(model, held[lang])
    central = spec.central_id
    retrieval = {}
    _, parallel = corpus.build_retrieval_set(cfg.seed, spec, cfg.n_eval, cfg.retrieval_len)
    reps = {
        lang: model.last_token_reps([as_prompt(s) for s in parallel[lang]], layers) for lang in spec.languages
    }
    for lang in spec.target_ids:
        retrieval[lang] = {l: retrieval_accuracy(reps[lang][l], reps[central][l], subspaces[l]) for l in layers}
    drift = central_drift(model, reference, held[central], layers)
    return EvalReport(fid, frac, empty, nta, retrieval, drift)
