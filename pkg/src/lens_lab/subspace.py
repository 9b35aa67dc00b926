"""Language subspace probing.

Given per-language last-token representations, build the ``d x L`` matrix of
language means and split it into

* a one-dimensional language-agnostic direction ``u_a`` shared by every
  language, and
* an ``r``-dimensional language-specific basis ``m_s`` (orthonormal columns,
  orthogonal to ``u_a``) with per-language coordinates ``gamma`` (``L x r``),

so that ``M ~= m_a 1^T + m_s gamma^T``. Projectors onto both subspaces and
per-language expression directions are derived from the fitted model.
"""

import json
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import numerics
from .errors import ArgumentError, FormatError, NumericalError

log = logging.getLogger(__name__)

ORTHO_FAIL_TOL = 1e-6
MEAN_SCALES = ("1/L", "1/d")


class DegenerateSubspaceWarning(UserWarning):
    """Language means carry (almost) no language-specific signal."""


@dataclass(frozen=True)
class LanguageSet:
    languages: tuple
    central_index: int = 0

    def __post_init__(self):
        langs = tuple(self.languages)
        object.__setattr__(self, "languages", langs)
        if len(set(langs)) != len(langs):
            raise ArgumentError(f"language ids must be unique: {langs}")
        if len(langs) < 2:
            raise ArgumentError("need at least two languages (one central, one target)")
        if not 0 <= self.central_index < len(langs):
            raise ArgumentError(f"central_index {self.central_index} out of range")

    @property
    def central(self):
        return self.languages[self.central_index]

    @property
    def targets(self):
        return tuple(l for i, l in enumerate(self.languages) if i != self.central_index)

    def index(self, lang):
        try:
            return self.languages.index(lang)
        except ValueError:
            raise ArgumentError(f"unknown language id {lang!r}") from None

    def __len__(self):
        return len(self.languages)


@dataclass
class MeanEmbeddings:
    m: np.ndarray  # (d, L), column l is the mean for language l
    language_set: LanguageSet

    def column(self, lang):
        return self.m[:, self.language_set.index(lang)]


@dataclass
class SubspaceModel:
    layer: int
    u_a: np.ndarray  # (d,)
    m_a_raw: np.ndarray  # (d,)
    m_s: np.ndarray  # (d, r)
    gamma: np.ndarray  # (L, r)
    language_set: LanguageSet

    @property
    def r(self):
        return self.m_s.shape[1]

    @property
    def d(self):
        return self.u_a.shape[0]

    @property
    def p_a(self):
        return np.outer(self.u_a, self.u_a)

    @property
    def p_s(self):
        return self.m_s @ self.m_s.T

    def residual(self, m):
        """Frobenius norm of ``M - m_a_raw 1^T - m_s gamma^T``."""
        m = np.asarray(m, dtype=np.float64)
        approx = self.m_a_raw[:, None] + self.m_s @ self.gamma.T
        return float(np.linalg.norm(m - approx))

    def to_dict(self):
        return {
            "layer": int(self.layer),
            "d": int(self.d),
            "r": int(self.r),
            "u_a": self.u_a.tolist(),
            "m_a_raw": self.m_a_raw.tolist(),
            "m_s": self.m_s.ravel().tolist(),
            "gamma": self.gamma.ravel().tolist(),
            "language_ids": list(self.language_set.languages),
            "central": self.language_set.central,
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            d, r = int(doc["d"]), int(doc["r"])
            langs = list(doc["language_ids"])
            lang_set = LanguageSet(tuple(langs), langs.index(doc["central"]))
            u_a = np.array(doc["u_a"], dtype=np.float64)
            m_a_raw = np.array(doc.get("m_a_raw", doc["u_a"]), dtype=np.float64)
            m_s = np.array(doc["m_s"], dtype=np.float64).reshape(d, r)
            gamma = np.array(doc["gamma"], dtype=np.float64).reshape(len(langs), r)
            layer = int(doc["layer"])
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"malformed subspace document: {exc}") from exc
        if u_a.shape != (d,) or m_a_raw.shape != (d,):
            raise FormatError("u_a / m_a_raw length does not match d")
        return cls(layer, u_a, m_a_raw, m_s, gamma, lang_set)


def save_subspaces(models, path):
    """Write one model or a list of per-layer models as JSON."""
    if isinstance(models, SubspaceModel):
        doc = models.to_dict()
    else:
        doc = {"subspaces": [m.to_dict() for m in models]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_subspaces(path):
    """Inverse of :func:`save_subspaces`; always returns a list."""
    with open(path) as fh:
        doc = json.load(fh)
    if "subspaces" in doc:
        return [SubspaceModel.from_dict(d) for d in doc["subspaces"]]
    return [SubspaceModel.from_dict(doc)]


def mean_embeddings(samples, central=None):
    """Column-stack the per-language mean of ``samples``.

    ``samples`` maps language id -> ``(n_l, d)`` array (or list of vectors);
    iteration order fixes the column order. ``central`` defaults to the first
    language.
    """
    langs = tuple(samples)
    if not langs:
        raise ArgumentError("no languages given")
    if central is None:
        central_index = 0
    elif central in langs:
        central_index = langs.index(central)
    else:
        raise ArgumentError(f"central language {central!r} not among {langs}")
    lang_set = LanguageSet(langs, central_index)
    cols = []
    dim = None
    for lang in langs:
        x = np.asarray(samples[lang], dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[0] < 1:
            raise ArgumentError(f"language {lang!r} has no samples")
        if dim is None:
            dim = x.shape[1]
        elif x.shape[1] != dim:
            raise ArgumentError(f"language {lang!r} has dim {x.shape[1]}, expected {dim}")
        cols.append(x.mean(axis=0))
    return MeanEmbeddings(np.stack(cols, axis=1), lang_set)


def _complete_basis(m_s, u_a, bad):
    """Replace columns flagged in ``bad`` by standard-basis vectors made
    orthonormal to ``u_a`` and to the kept columns."""
    d = u_a.shape[0]
    basis = [u_a] + [m_s[:, j] for j in range(m_s.shape[1]) if not bad[j]]
    out = m_s.copy()
    candidates = iter(range(d))
    for j in np.flatnonzero(bad):
        for k in candidates:
            v = np.zeros(d)
            v[k] = 1.0
            for _ in range(2):  # re-orthogonalise once for stability
                for b in basis:
                    v -= (b @ v) * b
            n = np.linalg.norm(v)
            if n > 1e-6:
                v /= n
                out[:, j] = v
                basis.append(v)
                break
        else:
            raise NumericalError("could not complete language-specific basis")
    return out


def probe(means, r=None, layer=0, mean_scale="1/L"):
    """Fit agnostic/specific subspaces to a :class:`MeanEmbeddings`.

    ``r`` defaults to ``L - 1``. ``mean_scale`` selects the factor used for
    the initial shared component (``"1/L"``: column mean; ``"1/d"``: the
    literal alternative reading).
    """
    m = np.asarray(means.m, dtype=np.float64)
    d, n_lang = m.shape
    if n_lang < 2:
        raise ArgumentError("probing needs at least two languages")
    if r is None:
        r = n_lang - 1
    if not isinstance(r, (int, np.integer)) or not 1 <= r <= n_lang - 1:
        raise ArgumentError(f"rank r={r!r} outside [1, L-1={n_lang - 1}]")
    if r + 1 > d:
        raise ArgumentError(f"rank r={r} needs d >= r+1, got d={d}")
    if mean_scale not in MEAN_SCALES:
        raise ArgumentError(f"mean_scale must be one of {MEAN_SCALES}")
    if not np.all(np.isfinite(m)):
        raise ArgumentError("mean embeddings contain non-finite values")

    ones = np.ones(n_lang)
    scale = 1.0 / n_lang if mean_scale == "1/L" else 1.0 / d
    m_a0 = scale * (m @ ones)
    m_s0, s0, v0 = numerics.top_r_svd(m - np.outer(m_a0, ones), r)
    m_prime = np.outer(m_a0, ones) + m_s0 @ (v0 * s0).T

    w = numerics.pinv(m_prime).T @ ones
    wn2 = w @ w
    if wn2 == 0.0:
        raise NumericalError("shared component vanished; mean matrix has no common direction")
    m_a_raw = w / wn2
    u_a = m_a_raw / np.linalg.norm(m_a_raw)

    resid = m_prime - np.outer(m_a_raw, ones)
    m_s, s, v = numerics.top_r_svd(resid, r)
    gamma = v * s

    tiny = 1e-10 * max(np.linalg.norm(m), np.finfo(np.float64).tiny)
    bad = s <= tiny
    if bad.any():
        warnings.warn(
            f"layer {layer}: {int(bad.sum())} of {r} language-specific directions carry "
            "no signal; completing basis arbitrarily",
            DegenerateSubspaceWarning,
            stacklevel=2,
        )
        m_s = _complete_basis(m_s, u_a, bad)
        gamma[:, bad] = 0.0

    leak = np.abs(u_a @ m_s).max()
    if leak > ORTHO_FAIL_TOL:
        raise NumericalError(
            f"layer {layer}: agnostic/specific subspaces not orthogonal (max |u_a^T m_s| = {leak:.3g})"
        )
    return SubspaceModel(layer, u_a, m_a_raw, m_s, gamma, means.language_set)


def _check_vec(model, v):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != model.d:
        raise ArgumentError(f"vector dim {v.shape[-1]} does not match subspace dim {model.d}")
    return v


def project_agnostic(model, v):
    """``P_a v`` with ``P_a = u_a u_a^T``; accepts a vector or a stack of rows."""
    v = _check_vec(model, v)
    return np.multiply.outer(v @ model.u_a, model.u_a)


def project_specific(model, v):
    """``P_s v`` with ``P_s = m_s m_s^T``; accepts a vector or a stack of rows."""
    v = _check_vec(model, v)
    return (v @ model.m_s) @ model.m_s.T


def direction(model, means, target):
    """Expression direction of ``target``: ``P_s (m_target - m_central)``."""
    lang_set = means.language_set
    if lang_set.index(target) == lang_set.central_index:
        raise ArgumentError("expression direction is undefined for the central language")
    diff = means.column(target) - means.column(lang_set.central)
    return project_specific(model, diff)


def directions(model, means):
    """Map every target language to its expression direction."""
    return {lang: direction(model, means, lang) for lang in means.language_set.targets}
