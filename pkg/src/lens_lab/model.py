"""Minimal decoder-only transformer in numpy with hand-written backprop.

Architecture: token + learned position embeddings, ``n_layers`` pre-LN
blocks (causal multi-head attention, GELU MLP), final LayerNorm, LM head tied
to the token embedding. The hidden state of layer ``l`` is the residual
stream after block ``l`` (before the final norm).

Layers with index ``< trainable_from`` (and the embeddings, unless
``trainable_from == 0``) are frozen: the backward passes produce no gradient
for them and the optimizer never touches them.
"""

import copy
import hashlib
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .corpus import EOS, PAD
from .errors import ArgumentError, FormatError

LN_EPS = 1e-5
_GELU_C = float(np.sqrt(2.0 / np.pi))

LAYER_PARAMS = ("ln1_g", "ln1_b", "wq", "wk", "wv", "wo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2")


@dataclass
class ModelConfig:
    vocab: int
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 128
    ctx: int = 32
    init_std: float = 0.02
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ArgumentError("d_model must be divisible by n_heads")
        if min(self.vocab, self.d_model, self.n_layers, self.n_heads, self.d_ff, self.ctx) < 1:
            raise ArgumentError("model dimensions must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ArgumentError("dtype must be float32 or float64")

    def n_params(self):
        """Closed-form parameter count."""
        V, D, F, T, L = self.vocab, self.d_model, self.d_ff, self.ctx, self.n_layers
        return V * D + T * D + L * (4 * D * D + 2 * D * F + F + D + 4 * D) + 2 * D


def param_names(n_layers):
    names = ["wte", "wpe"]
    for l in range(n_layers):
        names += [f"h{l}.{p}" for p in LAYER_PARAMS]
    return names + ["lnf_g", "lnf_b"]


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return 0.5 * (1.0 + t) + 0.5 * x * dt


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_back(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


@dataclass
class ForwardTrace:
    logits: np.ndarray  # (B, T, V)
    hidden: list  # per layer (B, T, D)
    last: np.ndarray  # (n_layers, B, D) at the last non-PAD position
    last_pos: np.ndarray  # (B,)
    cache: dict


class ToyTransformer:
    def __init__(self, config, params=None, trainable_from=None):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.params = self._init_params() if params is None else {k: np.asarray(v, self.dtype) for k, v in params.items()}
        missing = set(param_names(config.n_layers)) - set(self.params)
        if missing:
            raise ArgumentError(f"missing parameters {sorted(missing)}")
        self.trainable_from = max(config.n_layers - 2, 0) if trainable_from is None else trainable_from

    @property
    def trainable_from(self):
        return self._trainable_from

    @trainable_from.setter
    def trainable_from(self, value):
        if not 0 <= value <= self.config.n_layers:
            raise ArgumentError(f"trainable_from must be in [0, {self.config.n_layers}]")
        self._trainable_from = int(value)

    def _init_params(self):
        c = self.config
        rng = np.random.default_rng([c.seed, 0x70DE1])
        D, F = c.d_model, c.d_ff
        resid_std = c.init_std / np.sqrt(2 * c.n_layers)

        def normal(shape, std=c.init_std):
            return (rng.standard_normal(shape) * std).astype(self.dtype)

        p = {"wte": normal((c.vocab, D)), "wpe": normal((c.ctx, D))}
        for l in range(c.n_layers):
            p[f"h{l}.ln1_g"] = np.ones(D, self.dtype)
            p[f"h{l}.ln1_b"] = np.zeros(D, self.dtype)
            for w in ("wq", "wk", "wv"):
                p[f"h{l}.{w}"] = normal((D, D))
            p[f"h{l}.wo"] = normal((D, D), resid_std)
            p[f"h{l}.ln2_g"] = np.ones(D, self.dtype)
            p[f"h{l}.ln2_b"] = np.zeros(D, self.dtype)
            p[f"h{l}.w1"] = normal((D, F))
            p[f"h{l}.b1"] = np.zeros(F, self.dtype)
            p[f"h{l}.w2"] = normal((F, D), resid_std)
            p[f"h{l}.b2"] = np.zeros(D, self.dtype)
        p["lnf_g"] = np.ones(D, self.dtype)
        p["lnf_b"] = np.zeros(D, self.dtype)
        return p

    # ------------------------------------------------------------------
    def n_params(self):
        return int(sum(v.size for v in self.params.values()))

    def trainable_names(self):
        c = self.config
        names = []
        if self.trainable_from == 0:
            names += ["wte", "wpe"]
        for l in range(self.trainable_from, c.n_layers):
            names += [f"h{l}.{p}" for p in LAYER_PARAMS]
        if self.trainable_from < c.n_layers:
            names += ["lnf_g", "lnf_b"]
        return names

    def copy(self):
        return ToyTransformer(copy.deepcopy(self.config), {k: v.copy() for k, v in self.params.items()}, self.trainable_from)

    def astype(self, dtype):
        cfg = copy.deepcopy(self.config)
        cfg.dtype = np.dtype(dtype).name
        return ToyTransformer(cfg, {k: v.astype(dtype) for k, v in self.params.items()}, self.trainable_from)

    def checksum(self, names=None):
        """SHA-256 over the named parameters (all by default) in canonical order."""
        h = hashlib.sha256()
        for name in names or param_names(self.config.n_layers):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    def frozen_names(self):
        trainable = set(self.trainable_names())
        return [n for n in param_names(self.config.n_layers) if n not in trainable]

    # ------------------------------------------------------------------
    def _check_tokens(self, tokens):
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2 or tokens.shape[1] < 1:
            raise ArgumentError("tokens must be a non-empty (B, T) array")
        if tokens.shape[1] > self.config.ctx:
            raise ArgumentError(f"sequence length {tokens.shape[1]} exceeds ctx={self.config.ctx}")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab:
            raise ArgumentError("token id outside vocabulary")
        return tokens.astype(np.int64)

    def forward(self, tokens, keep_cache=False, with_logits=True):
        """Run the model on right-padded ``(B, T)`` tokens (or one sequence)."""
        tokens = self._check_tokens(tokens)
        p, c = self.params, self.config
        B, T = tokens.shape
        H, D = c.n_heads, c.d_model
        dh = D // H
        scale = 1.0 / float(np.sqrt(dh))
        mask = np.triu(np.ones((T, T), dtype=bool), k=1)

        x = p["wte"][tokens] + p["wpe"][:T]
        hidden, layers = [], []
        for l in range(c.n_layers):
            g = lambda n: p[f"h{l}.{n}"]  # noqa: E731
            a_in, ln1 = _layernorm(x, g("ln1_g"), g("ln1_b"))
            q = (a_in @ g("wq")).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            k = (a_in @ g("wk")).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            v = (a_in @ g("wv")).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            s = (q @ k.transpose(0, 1, 3, 2)) * scale
            s = np.where(mask, -np.inf, s)
            s = s - s.max(axis=-1, keepdims=True)
            e = np.exp(s)
            att = e / e.sum(axis=-1, keepdims=True)
            o = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
            x = x + o @ g("wo")
            m_in, ln2 = _layernorm(x, g("ln2_g"), g("ln2_b"))
            pre = m_in @ g("w1") + g("b1")
            act, t = _gelu(pre)
            x = x + act @ g("w2") + g("b2")
            hidden.append(x)
            if keep_cache:
                layers.append(dict(a_in=a_in, ln1=ln1, q=q, k=k, v=v, att=att, o=o, m_in=m_in, ln2=ln2, pre=pre, act=act, t=t))

        last_pos = (tokens != PAD).sum(axis=1) - 1
        last_pos = np.maximum(last_pos, 0)
        rows = np.arange(B)
        last = np.stack([h[rows, last_pos] for h in hidden]) if hidden else np.zeros((0, B, D), self.dtype)

        logits = None
        cache = {"tokens": tokens, "layers": layers}
        if with_logits:
            xf, lnf = _layernorm(x, p["lnf_g"], p["lnf_b"])
            logits = xf @ p["wte"].T
            cache.update(xf=xf, lnf=lnf)
        return ForwardTrace(logits, hidden, last, last_pos, cache)

    def last_token_reps(self, tokens, layers, batch_size=64):
        """``{layer: (N, D)}`` last-token hidden states for token lists or an array."""
        seqs = list(tokens)
        out = {l: [] for l in layers}
        for i in range(0, len(seqs), batch_size):
            chunk = seqs[i : i + batch_size]
            trace = self.forward(_pad(chunk), with_logits=False)
            for l in layers:
                out[l].append(trace.last[l])
        return {l: np.concatenate(v) if v else np.zeros((0, self.config.d_model), self.dtype) for l, v in out.items()}

    # ------------------------------------------------------------------
    def _backward(self, trace, dlogits=None, dhidden=None, stop_layer=0):
        p, c = self.params, self.config
        cache = trace.cache
        if not cache.get("layers"):
            raise ArgumentError("forward must be run with keep_cache=True before backward")
        tokens = cache["tokens"]
        B, T = tokens.shape
        H, D = c.n_heads, c.d_model
        dh = D // H
        scale = 1.0 / float(np.sqrt(dh))
        grads = {}
        dx = np.zeros((B, T, D), self.dtype)

        if dlogits is not None:
            dxf = dlogits @ p["wte"]
            grads["wte"] = np.einsum("btv,btd->vd", dlogits, cache["xf"]).astype(self.dtype)
            dx, grads["lnf_g"], grads["lnf_b"] = _layernorm_back(dxf, p["lnf_g"], cache["lnf"])

        for l in range(c.n_layers - 1, stop_layer - 1, -1):
            if dhidden and l in dhidden:
                dx = dx + dhidden[l]
            L = cache["layers"][l]
            g = lambda n: p[f"h{l}.{n}"]  # noqa: E731
            pre = f"h{l}."
            # MLP branch
            grads[pre + "b2"] = dx.reshape(-1, D).sum(axis=0)
            grads[pre + "w2"] = L["act"].reshape(-1, c.d_ff).T @ dx.reshape(-1, D)
            dact = dx @ g("w2").T
            dpre = dact * _gelu_grad(L["pre"], L["t"])
            grads[pre + "b1"] = dpre.reshape(-1, c.d_ff).sum(axis=0)
            grads[pre + "w1"] = L["m_in"].reshape(-1, D).T @ dpre.reshape(-1, c.d_ff)
            dm_in = dpre @ g("w1").T
            dmid, grads[pre + "ln2_g"], grads[pre + "ln2_b"] = _layernorm_back(dm_in, g("ln2_g"), L["ln2"])
            dx = dx + dmid
            # attention branch
            grads[pre + "wo"] = L["o"].reshape(-1, D).T @ dx.reshape(-1, D)
            do = (dx @ g("wo").T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
            datt = do @ L["v"].transpose(0, 1, 3, 2)
            dv = L["att"].transpose(0, 1, 3, 2) @ do
            att = L["att"]
            ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True)) * scale
            dq = ds @ L["k"]
            dk = ds.transpose(0, 1, 3, 2) @ L["q"]
            merge = lambda a: a.transpose(0, 2, 1, 3).reshape(B * T, D)  # noqa: E731
            dq, dk, dv = merge(dq), merge(dk), merge(dv)
            a_in = L["a_in"].reshape(-1, D)
            grads[pre + "wq"] = a_in.T @ dq
            grads[pre + "wk"] = a_in.T @ dk
            grads[pre + "wv"] = a_in.T @ dv
            da_in = (dq @ g("wq").T + dk @ g("wk").T + dv @ g("wv").T).reshape(B, T, D)
            dres, grads[pre + "ln1_g"], grads[pre + "ln1_b"] = _layernorm_back(da_in, g("ln1_g"), L["ln1"])
            dx = dx + dres

        if stop_layer == 0:
            dwte = np.zeros_like(p["wte"])
            np.add.at(dwte, tokens.reshape(-1), dx.reshape(-1, D))
            grads["wte"] = grads.get("wte", 0) + dwte
            grads["wpe"] = np.zeros_like(p["wpe"])
            grads["wpe"][:T] = dx.sum(axis=0)
        trainable = set(self.trainable_names())
        return {k: v.astype(self.dtype, copy=False) for k, v in grads.items() if k in trainable}

    def backward_lens(self, trace, loss_grads):
        """Parameter gradients from gradients on last-token hidden states.

        ``loss_grads`` maps layer -> ``(B, D)`` gradient w.r.t. the last-token
        state of that layer in ``trace``. Only layers ``>= trainable_from``
        may receive a gradient.
        """
        c = self.config
        if self.trainable_from >= c.n_layers:
            bad = [l for l in loss_grads if np.any(loss_grads[l])]
            if bad:
                raise ArgumentError(f"gradient supplied for frozen layers {bad}")
            return {}
        B = trace.cache["tokens"].shape[0]
        T = trace.cache["tokens"].shape[1]
        rows = np.arange(B)
        dhidden = {}
        for layer, g in loss_grads.items():
            if not self.trainable_from <= layer < c.n_layers:
                raise ArgumentError(f"layer {layer} is not a manipulated (trainable) layer")
            g = np.asarray(g, dtype=self.dtype)
            if g.shape != (B, c.d_model):
                raise ArgumentError(f"gradient for layer {layer} has shape {g.shape}, expected {(B, c.d_model)}")
            dh = np.zeros((B, T, c.d_model), self.dtype)
            dh[rows, trace.last_pos] = g
            dhidden[layer] = dh
        return self._backward(trace, dhidden=dhidden, stop_layer=self.trainable_from)

    def lm_loss(self, tokens, trace=None):
        """Mean next-token cross-entropy over non-PAD targets."""
        tokens = self._check_tokens(tokens)
        trace = trace or self.forward(tokens)
        loss, _ = _cross_entropy(trace.logits, tokens, need_grad=False)
        return loss

    def backward_lm(self, tokens):
        """Next-token cross-entropy (PAD targets masked) and its gradients."""
        tokens = self._check_tokens(tokens)
        if tokens.shape[1] < 2 or not np.any(tokens[:, 1:] != PAD):
            raise ArgumentError("batch has no non-PAD prediction targets")
        trace = self.forward(tokens, keep_cache=True)
        loss, dlogits = _cross_entropy(trace.logits, tokens, need_grad=True)
        stop = self.trainable_from if self.trainable_from < self.config.n_layers else self.config.n_layers
        grads = self._backward(trace, dlogits=dlogits.astype(self.dtype), stop_layer=stop)
        return loss, grads

    # ------------------------------------------------------------------
    def generate(self, prompt, max_new=16):
        """Greedy continuation of a single prompt; stops at EOS or ``max_new``."""
        return self.generate_batch([prompt], max_new)[0]

    def generate_batch(self, prompts, max_new=16):
        """Greedy continuation of equal-length prompts; returns new tokens only."""
        if not prompts or any(len(p) == 0 for p in prompts):
            raise ArgumentError("prompts must be non-empty")
        lengths = {len(p) for p in prompts}
        if len(lengths) != 1:
            raise ArgumentError("generate_batch needs equal-length prompts")
        n = lengths.pop()
        if n > self.config.ctx:
            raise ArgumentError(f"prompt length {n} exceeds ctx={self.config.ctx}")
        seqs = np.array(prompts, dtype=np.int64)
        out = [[] for _ in prompts]
        done = np.zeros(len(prompts), dtype=bool)
        for _ in range(max_new):
            if seqs.shape[1] >= self.config.ctx or done.all():
                break
            logits = self.forward(seqs).logits[:, -1]
            nxt = np.argmax(logits, axis=-1)
            for i, t in enumerate(nxt):
                if not done[i]:
                    out[i].append(int(t))
                    done[i] = t == EOS
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
        return out


def _pad(seqs):
    length = max(len(s) for s in seqs)
    arr = np.full((len(seqs), length), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        arr[i, : len(s)] = s
    return arr


def _cross_entropy(logits, tokens, need_grad):
    logits = logits[:, :-1]
    targets = tokens[:, 1:]
    valid = targets != PAD
    n = int(valid.sum())
    if n == 0:
        raise ArgumentError("no non-PAD prediction targets")
    z = logits - logits.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logz
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float(-(picked * valid).sum() / n)
    if not need_grad:
        return loss, None
    d = np.exp(logp)
    np.put_along_axis(d, targets[..., None], np.take_along_axis(d, targets[..., None], axis=-1) - 1.0, axis=-1)
    d *= (valid / n)[..., None]
    full = np.zeros(tokens.shape + (logits.shape[-1],), dtype=d.dtype)
    full[:, :-1] = d
    return loss, full


# ----------------------------------------------------------------------------
# Reference snapshot


class ReferenceSnapshot:
    """Read-only copy of a model taken before fine-tuning."""

    def __init__(self, model):
        self._model = model.copy()
        for v in self._model.params.values():
            v.setflags(write=False)
        self._checksum = self._model.checksum()

    @property
    def model(self):
        return self._model

    def checksum(self):
        return self._model.checksum()

    def intact(self):
        return self.checksum() == self._checksum

    def forward(self, tokens):
        return self._model.forward(tokens)

    def reps(self, tokens, layers):
        return self._model.last_token_reps(tokens, layers)


def snapshot(model):
    return ReferenceSnapshot(model)


def rep_from_ref(snap, tokens, layer):
    """Last-token hidden state of ``layer`` for one sequence on the snapshot."""
    return snap.reps([list(tokens)], [layer])[layer][0]


# ----------------------------------------------------------------------------
# Checkpoints

CKPT_MAGIC = b"LENSCKPT"
CKPT_VERSION = 1


def encode_checkpoint(model):
    cfg = json.dumps(asdict(model.config), sort_keys=True).encode("utf-8")
    dt = "<f4" if model.dtype == np.float32 else "<f8"
    blob = b"".join(np.ascontiguousarray(model.params[n], dtype=dt).tobytes() for n in param_names(model.config.n_layers))
    return CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(cfg)) + cfg + blob


def decode_checkpoint(buf):
    if buf[:8] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    if len(buf) < 16:
        raise FormatError("truncated checkpoint header", offset=len(buf))
    version, n_cfg = struct.unpack_from("<II", buf, 8)
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=8)
    if 16 + n_cfg > len(buf):
        raise FormatError("truncated config", offset=16)
    try:
        config = ModelConfig(**json.loads(buf[16 : 16 + n_cfg].decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"bad config JSON: {exc}", offset=16) from exc
    template = ToyTransformer(config)
    dt = np.dtype("<f4" if config.dtype == "float32" else "<f8")
    pos = 16 + n_cfg
    params = {}
    for name in param_names(config.n_layers):
        shape = template.params[name].shape
        nbytes = int(np.prod(shape)) * dt.itemsize
        if pos + nbytes > len(buf):
            raise FormatError(f"truncated parameter blob at {name}", offset=pos)
        params[name] = np.frombuffer(buf, dtype=dt, count=int(np.prod(shape)), offset=pos).reshape(shape).astype(config.dtype)
        pos += nbytes
    if pos != len(buf):
        raise FormatError("trailing bytes after parameter blob", offset=pos)
    return ToyTransformer(config, params)


def save_checkpoint(model, path):
    """Write the checkpoint and a ``<path>.json`` manifest; returns the SHA-256."""
    buf = encode_checkpoint(model)
    with open(path, "wb") as fh:
        fh.write(buf)
    digest = hashlib.sha256(buf).hexdigest()
    manifest = {
        "file": str(path).rsplit("/", 1)[-1],
        "sha256": digest,
        "n_params": model.n_params(),
        "param_order": param_names(model.config.n_layers),
        "trainable_from": model.trainable_from,
        "config": asdict(model.config),
    }
    with open(f"{path}.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    return digest


def load_checkpoint(path, verify=True):
    with open(path, "rb") as fh:
        buf = fh.read()
    model = decode_checkpoint(buf)
    if verify:
        try:
            with open(f"{path}.json") as fh:
                manifest = json.load(fh)
        except FileNotFoundError:
            manifest = None
        if manifest is not None:
            if manifest.get("sha256") != hashlib.sha256(buf).hexdigest():
                raise FormatError(f"checkpoint {path} does not match its manifest hash")
            model.trainable_from = manifest.get("trainable_from", model.trainable_from)
    return model
