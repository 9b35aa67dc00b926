"""JSON run configuration: one section per stage, every field optional.

Defaults reproduce the toy pipeline used by the acceptance suite. Unknown
keys anywhere are rejected before any work starts.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .corpus import ToyLanguageSpec
from .errors import ConfigError
from .evaluation import EvalConfig
from .losses import LensWeights
from .model import ModelConfig
from .trainer import TrainConfig


@dataclass
class CorpusSection:
    num_languages: int = 3
    semantic_vocab_size: int = 64
    ctx: int = 32
    min_len: int = 4
    max_len: int = 24
    branching: int = 3
    chain_seed: int = 0
    central: int = 0
    mixture: list = None  # default: 90% central, rest split evenly
    switch_hazard: float = 0.4
    probe_n: int = 300
    manip_n: int = 200

    def spec(self):
        return ToyLanguageSpec(self.num_languages, self.semantic_vocab_size, self.ctx, self.min_len,
                               self.max_len, self.branching, self.chain_seed, self.central)

    def resolved_mixture(self):
        if self.mixture is not None:
            if len(self.mixture) != self.num_languages:
                raise ConfigError("corpus.mixture needs one weight per language")
            return [float(x) for x in self.mixture]
        rest = 0.1 / (self.num_languages - 1)
        return [0.9 if i == self.central else rest for i in range(self.num_languages)]


@dataclass
class ModelSection:
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 128
    init_std: float = 0.02
    dtype: str = "float32"


@dataclass
class TrainSection:
    pretrain_steps: int = 2000
    pretrain_lr: float = 3e-3
    pretrain_batch: int = 16
    lens_lr: float = 3e-3
    lens_batch: int = 8
    epochs: int = 1
    warmup_ratio: float = 0.05


@dataclass
class LensSection:
    lambda1: float = 1.0
    lambda3: float = 1.0
    lambda_l: object = 1.0  # number (all targets) or {language: strength}
    start_layer: int = None  # default n_layers - 2
    last_layer: int = None  # default n_layers - 1
    rank: int = None  # default L - 1
    mean_scale: str = "1/L"


@dataclass
class EvalSection:
    prompt_len: int = 4
    max_new: int = 16
    n_eval: int = 100
    seed: int = 1234
    retrieval_len: int = 12


@dataclass
class RunConfig:
    seed: int = 0
    corpus: CorpusSection = field(default_factory=CorpusSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    lens: LensSection = field(default_factory=LensSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # -- derived objects -------------------------------------------------
    def spec(self):
        return self.corpus.spec()

    def model_config(self):
        m = self.model
        return ModelConfig(self.spec().vocab_size, m.d_model, m.n_layers, m.n_heads, m.d_ff,
                           self.corpus.ctx, m.init_std, self.seed, m.dtype)

    def layer_range(self):
        n = self.model.n_layers
        start = n - 2 if self.lens.start_layer is None else self.lens.start_layer
        last = n - 1 if self.lens.last_layer is None else self.lens.last_layer
        if not 0 <= start <= last < n:
            raise ConfigError(f"lens layer range [{start}, {last}] invalid for {n} layers")
        return start, last

    def lens_weights(self):
        spec = self.spec()
        lam = self.lens.lambda_l
        if isinstance(lam, dict):
            unknown = set(lam) - set(spec.languages)
            if unknown:
                raise ConfigError(f"lens.lambda_l names unknown languages {sorted(unknown)}")
            missing = [t for t in spec.target_ids if t not in lam]
            if missing:
                raise ConfigError(f"lens.lambda_l has no push strength for target language {missing[0]!r}")
            lam = {t: float(lam[t]) for t in spec.target_ids}
        else:
            lam = {t: float(lam) for t in spec.target_ids}
        return LensWeights(self.lens.lambda1, self.lens.lambda3, lam, self.layer_range())

    def pretrain_config(self):
        t = self.train
        return TrainConfig(phase="pretrain", lr=t.pretrain_lr, batch_size=t.pretrain_batch,
                           steps=t.pretrain_steps, warmup_ratio=t.warmup_ratio, seed=self.seed)

    def lens_config(self):
        t = self.train
        return TrainConfig(phase="lens", lr=t.lens_lr, batch_size=t.lens_batch, epochs=t.epochs,
                           warmup_ratio=t.warmup_ratio, seed=self.seed, weights=self.lens_weights(),
                           rank=self.lens.rank, mean_scale=self.lens.mean_scale)

    def eval_config(self):
        e = self.eval
        start, last = self.layer_range()
        return EvalConfig(e.prompt_len, e.max_new, e.n_eval, e.seed, tuple(range(start, last + 1)), e.retrieval_len)

    def validate(self):
        """Build every derived object once so bad values fail early."""
        self.spec()
        self.corpus.resolved_mixture()
        self.model_config()
        self.lens_weights()
        self.pretrain_config()
        self.lens_config()
        self.eval_config()
        return self

    def to_dict(self):
        doc = dataclasses.asdict(self)
        doc["corpus"]["mixture"] = self.corpus.resolved_mixture()
        doc["lens"]["start_layer"], doc["lens"]["last_layer"] = self.layer_range()
        doc["lens"]["rank"] = self.spec().num_languages - 1 if self.lens.rank is None else self.lens.rank
        doc["lens"]["lambda_l"] = self.lens_weights().lambda_l
        return doc


_SECTIONS = {"corpus": CorpusSection, "model": ModelSection, "train": TrainSection,
             "lens": LensSection, "eval": EvalSection}


def _build(cls, doc, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")
    kwargs = {}
    for key, value in doc.items():
        kind = names[key].type
        if value is None or kind not in (int, float, str):
            kwargs[key] = value
        elif isinstance(value, bool) or not isinstance(value, (int, float) if kind is float else kind):
            raise ConfigError(f"{where}.{key} must be of type {kind.__name__}")
        else:
            kwargs[key] = kind(value)
    return cls(**kwargs)


def from_dict(doc, env=None):
    """Validated :class:`RunConfig` from a JSON-like dict.

    ``LENS_SEED`` in ``env`` (default ``os.environ``) overrides ``seed``.
    """
    doc = dict(doc or {})
    unknown = set(doc) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    kwargs = {name: _build(cls, doc.get(name, {}), name) for name, cls in _SECTIONS.items()}
    seed = doc.get("seed", 0)
    env = os.environ if env is None else env
    if env.get("LENS_SEED"):
        try:
            seed = int(env["LENS_SEED"])
        except ValueError:
            raise ConfigError(f"LENS_SEED must be an integer, got {env['LENS_SEED']!r}") from None
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    return RunConfig(seed=seed, **kwargs).validate()


def load(path=None, env=None):
    if path is None:
        return from_dict({}, env)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(doc, env)


def save(cfg, path):
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
