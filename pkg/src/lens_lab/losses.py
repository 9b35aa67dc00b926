"""Pull / push / retain objectives on last-token representations.

* pull:   ``||P_a (x_l - x_c)||^2`` aligns a target sentence with its central
          translation inside the agnostic subspace.
* push:   ``||P_s (x_l - x_l_ref) - lam_l * delta_l||^2`` moves the target
          representation a fixed step along its expression direction.
* retain: ``||x_c - x_c_ref||^2`` keeps central representations in place.

Every function accepts a single vector ``(d,)`` or a stack ``(B, d)``; the
``*_grad`` variants return per-row values together with the gradient with
respect to the live representations. Reference representations are
constants and never receive a gradient.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, ConfigError


@dataclass
class LensWeights:
    lambda1: float = 1.0
    lambda3: float = 1.0
    lambda_l: dict = field(default_factory=dict)
    manipulated_layers: tuple = (2, 3)  # inclusive [start, last]

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda3 < 0:
            raise ConfigError("lambda1 and lambda3 must be non-negative")
        for lang, lam in self.lambda_l.items():
            if lam < 0:
                raise ConfigError(f"push strength for {lang!r} must be non-negative")
        start, last = self.manipulated_layers
        if start > last or start < 0:
            raise ConfigError(f"empty manipulated layer range {self.manipulated_layers}")
        self.manipulated_layers = (int(start), int(last))

    @property
    def layers(self):
        start, last = self.manipulated_layers
        return list(range(start, last + 1))

    def push_strength(self, lang):
        try:
            return float(self.lambda_l[lang])
        except KeyError:
            raise ConfigError(f"no push strength (lambda_l) for target language {lang!r}") from None

    def require(self, targets):
        for lang in targets:
            self.push_strength(lang)


@dataclass
class LayerReps:
    """Last-token representations of one manipulated layer, one row per item."""

    x_l: np.ndarray
    x_c: np.ndarray
    x_l_ref: np.ndarray
    x_c_ref: np.ndarray


@dataclass
class RepBatch:
    target: str
    layers: dict  # layer index -> LayerReps


@dataclass
class LossBreakdown:
    l1: float
    l2: float
    l3: float
    total: float
    per_layer: dict  # layer -> (l1, l2, l3, total)
    grads: dict  # layer -> (d total / d x_l, d total / d x_c), shapes (B, d)


def _reps(d, *arrays):
    out = []
    for a in arrays:
        a = np.asarray(a, dtype=np.float64)
        if a.shape[-1] != d:
            raise ArgumentError(f"representation dim {a.shape[-1]} does not match subspace dim {d}")
        out.append(a)
    return np.broadcast_arrays(*out)


def pull_grad(model, x_l, x_c):
    x_l, x_c = _reps(model.d, x_l, x_c)
    proj = np.multiply.outer((x_l - x_c) @ model.u_a, model.u_a)
    return np.sum(proj * proj, axis=-1), 2.0 * proj


def push_grad(model, x_l, x_l_ref, delta, lambda_l):
    x_l, x_l_ref, delta = _reps(model.d, x_l, x_l_ref, delta)
    diff = x_l - x_l_ref
    resid = (diff @ model.m_s) @ model.m_s.T - lambda_l * delta
    # exact gradient is 2 P_s resid; equals 2 resid when delta lies in span(m_s)
    return np.sum(resid * resid, axis=-1), 2.0 * ((resid @ model.m_s) @ model.m_s.T)


def retain_grad(x_c, x_c_ref):
    x_c = np.asarray(x_c, dtype=np.float64)
    x_c_ref = np.asarray(x_c_ref, dtype=np.float64)
    if x_c.shape != x_c_ref.shape:
        raise ArgumentError(f"shape mismatch {x_c.shape} vs {x_c_ref.shape}")
    diff = x_c - x_c_ref
    return np.sum(diff * diff, axis=-1), 2.0 * diff


def pull_loss(model, x_l, x_c):
    return float(np.sum(pull_grad(model, x_l, x_c)[0]))


def push_loss(model, x_l, x_l_ref, delta, lambda_l):
    return float(np.sum(push_grad(model, x_l, x_l_ref, delta, lambda_l)[0]))


def retain_loss(x_c, x_c_ref):
    return float(np.sum(retain_grad(x_c, x_c_ref)[0]))


def total_loss(subspaces, deltas, weights, batch):
    """Weighted objective summed over layers and averaged over batch rows.

    ``subspaces`` maps layer -> SubspaceModel; ``deltas`` maps layer ->
    {language: expression direction}.
    """
    lam_l = weights.push_strength(batch.target)
    l1 = l2 = l3 = 0.0
    per_layer, grads = {}, {}
    for layer in sorted(batch.layers):
        if layer not in subspaces:
            raise ArgumentError(f"no subspace fitted for layer {layer}")
        reps = batch.layers[layer]
        model = subspaces[layer]
        x_l = np.atleast_2d(reps.x_l)
        n = x_l.shape[0]
        v1, g1 = pull_grad(model, x_l, np.atleast_2d(reps.x_c))
        v2, g2 = push_grad(model, x_l, np.atleast_2d(reps.x_l_ref), deltas[layer][batch.target], lam_l)
        v3, g3 = retain_grad(np.atleast_2d(reps.x_c), np.atleast_2d(reps.x_c_ref))
        a1, a2, a3 = float(v1.mean()), float(v2.mean()), float(v3.mean())
        tot = weights.lambda1 * a1 + a2 + weights.lambda3 * a3
        per_layer[layer] = (a1, a2, a3, tot)
        g_xl = (weights.lambda1 * g1 + g2) / n
        g_xc = (-weights.lambda1 * g1 + weights.lambda3 * g3) / n
        grads[layer] = (g_xl, g_xc)
        l1 += a1
        l2 += a2
        l3 += a3
    total = weights.lambda1 * l1 + l2 + weights.lambda3 * l3
    return LossBreakdown(l1, l2, l3, total, per_layer, grads)
