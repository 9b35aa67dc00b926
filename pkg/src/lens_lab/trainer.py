"""Backbone pretraining and LENS fine-tuning loops, plus ablation sweeps."""

import copy
import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import corpus, subspace
from .errors import ArgumentError, ConfigError, NumericalError
from .evaluation import EvalConfig, as_prompt, evaluate
from .losses import LayerReps, LensWeights, RepBatch, total_loss
from .model import ReferenceSnapshot, save_checkpoint
from .optim import Adam, cosine_lr

log = logging.getLogger(__name__)

LARGE_MODEL_LENS_LR = 1e-5  # rate used for 8B backbones; far too small for the toy
METRIC_FIELDS = ["step", "layer", "lang", "l1", "l2", "l3", "total", "lr"]
SWEEP_AXES = ("lambda1", "lambda_l", "lambda3", "start_layer", "data_volume")


@dataclass
class TrainConfig:
    phase: str = "lens"
    lr: float = None  # phase default: 3e-3 for both phases
    batch_size: int = None  # phase default: 16 pretrain, 8 lens
    epochs: int = 1
    steps: int = 2000  # pretraining only
    warmup_ratio: float = 0.05
    schedule: str = "cosine"
    optimizer: str = "adam"
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    weights: LensWeights = field(default_factory=LensWeights)
    rank: int = None  # default L - 1
    mean_scale: str = "1/L"

    def __post_init__(self):
        if self.phase not in ("pretrain", "lens"):
            raise ConfigError(f"phase must be 'pretrain' or 'lens', got {self.phase!r}")
        if self.lr is None:
            self.lr = 3e-3
        if self.batch_size is None:
            self.batch_size = 16 if self.phase == "pretrain" else 8
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.steps < 0:
            raise ConfigError("batch_size and epochs must be >= 1, steps >= 0")
        if not 0.0 <= self.warmup_ratio < 1.0:
            raise ConfigError("warmup_ratio must be in [0, 1)")
        if self.schedule != "cosine" or self.optimizer != "adam":
            raise ConfigError("only the adam optimizer with a cosine schedule is supported")
        if isinstance(self.weights, dict):
            self.weights = LensWeights(**self.weights)
        self.betas = tuple(self.betas)

    def echo(self):
        doc = asdict(self)
        doc["weights"]["manipulated_layers"] = list(self.weights.manipulated_layers)
        doc["betas"] = list(self.betas)
        return doc


@dataclass
class TrainReport:
    rows: list
    wall_time: float
    checkpoint: str
    config: dict
    reference_checksum: str = None
    reference_checksum_end: str = None
    probe_count: int = 0
    subspaces: dict = field(default_factory=dict)
    deltas: dict = field(default_factory=dict)
    reference: ReferenceSnapshot = None


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_rows(rows, path, fields):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _write_manifest(out_dir, config, files, wall_time, extra=None):
    doc = {
        "config": config,
        "seed": config.get("seed"),
        "files": {os.path.basename(p): file_sha256(p) for p in files if p and os.path.exists(p)},
        "wall_time": wall_time,
    }
    doc.update(extra or {})
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


# ----------------------------------------------------------------------------


def pretrain(model, spec, config, mixture=(0.9, 0.05, 0.05), switch_hazard=0.4, out_dir=None):
    """Next-token pretraining on a language mixture; all layers trainable.

    Writes ``pretrain_metrics.csv``, ``pretrained.ckpt`` and ``manifest.json``
    under ``out_dir`` when given.
    """
    t0 = time.time()
    model.trainable_from = 0
    opt = Adam(model.params, config.betas, config.eps)
    rows = []
    n = config.steps
    batches = corpus.mixture_batches(config.seed, spec, mixture, config.batch_size, n, switch_hazard)
    for step, seqs in enumerate(batches):
        lr = cosine_lr(step, n, config.lr, config.warmup_ratio)
        with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
            loss, grads = model.backward_lm(corpus.pad_batch(seqs))
        if not np.isfinite(loss):
            raise NumericalError(f"pretraining diverged at step {step} (loss={loss})")
        opt.step(grads, lr)
        rows.append({"step": step, "loss": loss, "lr": lr})
    ckpt = None
    wall = time.time() - t0
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_rows(rows, os.path.join(out_dir, "pretrain_metrics.csv"), ["step", "loss", "lr"])
        ckpt = os.path.join(out_dir, "pretrained.ckpt")
        save_checkpoint(model, ckpt)
        _write_manifest(out_dir, config.echo(), [ckpt, os.path.join(out_dir, "pretrain_metrics.csv")], wall)
    return TrainReport(rows, wall, ckpt, config.echo())


def fit_subspaces(reference, probing_set, layers, central, rank=None, mean_scale="1/L"):
    """Probe every layer on the reference model's last-token states.

    Returns ``(subspaces, deltas)`` keyed by layer.
    """
    subs, deltas = {}, {}
    langs = list(probing_set)
    prompts = {lang: [as_prompt(s) for s in probing_set[lang]] for lang in langs}
    reps = {lang: reference.reps(prompts[lang], layers) for lang in langs}
    for layer in layers:
        means = subspace.mean_embeddings({lang: reps[lang][layer] for lang in langs}, central=central)
        subs[layer] = subspace.probe(means, r=rank, layer=layer, mean_scale=mean_scale)
        deltas[layer] = subspace.directions(subs[layer], means)
    return subs, deltas


def _lens_batches(pairs, batch_size, epochs, seed):
    """Single-target batches, targets interleaved round-robin, reshuffled per epoch."""
    by_lang = {}
    for i, p in enumerate(pairs):
        by_lang.setdefault(p.target, []).append(i)
    rng = np.random.default_rng([seed, 0x1E45])
    out = []
    for epoch in range(epochs):
        chunks = {}
        for lang, idx in by_lang.items():
            order = list(idx) if epoch == 0 else list(rng.permutation(idx))
            chunks[lang] = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
        for k in range(max(len(c) for c in chunks.values())):
            for lang in by_lang:
                if k < len(chunks[lang]):
                    out.append((lang, chunks[lang][k]))
    return out


def lens_finetune(model, probing_set, manipulation_set, config, central=None, out_dir=None):
    """Probe subspaces on a frozen reference, then fine-tune the manipulated layers.

    ``probing_set`` maps language -> token sequences; ``manipulation_set`` is
    a list of :class:`~lens_lab.corpus.ParallelPair`. The model is modified
    in place.
    """
    t0 = time.time()
    weights = config.weights
    layers = weights.layers
    n_layers = model.config.n_layers
    if layers[-1] >= n_layers:
        raise ConfigError(f"manipulated layers {weights.manipulated_layers} exceed model depth {n_layers}")
    targets = sorted({p.target for p in manipulation_set})
    weights.require(targets)
    central = central or (manipulation_set[0].central if manipulation_set else list(probing_set)[0])
    weights.require([lang for lang in probing_set if lang != central])

    model.trainable_from = layers[0]
    reference = ReferenceSnapshot(model)
    ref_sum = reference.checksum()
    subs, deltas = fit_subspaces(reference, probing_set, layers, central, config.rank, config.mean_scale)

    t_prompts = [as_prompt(p.target_tokens) for p in manipulation_set]
    c_prompts = [as_prompt(p.central_tokens) for p in manipulation_set]

    plan = _lens_batches(manipulation_set, config.batch_size, config.epochs, config.seed)
    opt = Adam(model.params, config.betas, config.eps)
    rows = []
    n_steps = len(plan)
    for step, (lang, idx) in enumerate(plan):
        lr = cosine_lr(step, n_steps, config.lr, config.warmup_ratio)
        x_t = corpus.pad_batch([t_prompts[i] for i in idx])
        x_c = corpus.pad_batch([c_prompts[i] for i in idx])
        tr_t = model.forward(x_t, keep_cache=True, with_logits=False)
        tr_c = model.forward(x_c, keep_cache=True, with_logits=False)
        # references on the very same padded batch, so an unchanged model gives
        # exactly zero residuals (float32 results depend on the batch shape)
        ref_t = reference.model.forward(x_t, with_logits=False).last
        ref_c = reference.model.forward(x_c, with_logits=False).last
        batch = RepBatch(
            lang,
            {
                l: LayerReps(
                    tr_t.last[l].astype(np.float64),
                    tr_c.last[l].astype(np.float64),
                    ref_t[l].astype(np.float64),
                    ref_c[l].astype(np.float64),
                )
                for l in layers
            },
        )
        br = total_loss(subs, deltas, weights, batch)
        if not np.isfinite(br.total):
            raise NumericalError(f"LENS objective became non-finite at step {step}")
        g_t = model.backward_lens(tr_t, {l: br.grads[l][0] for l in layers})
        g_c = model.backward_lens(tr_c, {l: br.grads[l][1] for l in layers})
        grads = {k: g_t[k] + g_c[k] for k in g_t}
        opt.step(grads, lr)
        for l in layers:
            l1, l2, l3, tot = br.per_layer[l]
            rows.append({"step": step, "layer": l, "lang": lang, "l1": l1, "l2": l2, "l3": l3, "total": tot, "lr": lr})

    wall = time.time() - t0
    report = TrainReport(
        rows, wall, None, config.echo(), ref_sum, reference.checksum(), 1, subs, deltas, reference
    )
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        metrics = os.path.join(out_dir, "metrics.csv")
        _write_rows(rows, metrics, METRIC_FIELDS)
        report.checkpoint = os.path.join(out_dir, "enhanced.ckpt")
        save_checkpoint(model, report.checkpoint)
        subspace.save_subspaces([subs[l] for l in layers], os.path.join(out_dir, "subspaces.json"))
        _write_manifest(
            out_dir,
            config.echo(),
            [metrics, report.checkpoint, os.path.join(out_dir, "subspaces.json")],
            wall,
            {"reference_checksum": ref_sum},
        )
    return report


def step_losses(rows):
    """Total objective per step (summed over layers), in step order."""
    per = {}
    for r in rows:
        per[r["step"]] = per.get(r["step"], 0.0) + r["total"]
    return [per[k] for k in sorted(per)]


# ----------------------------------------------------------------------------


def apply_axis(config, axis, value, targets):
    """Copy of ``config`` with one sweep axis set; returns ``(config, n_per_lang)``."""
    cfg = copy.deepcopy(config)
    w = cfg.weights
    n_per_lang = None
    if axis == "lambda1":
        w.lambda1 = float(value)
    elif axis == "lambda3":
        w.lambda3 = float(value)
    elif axis == "lambda_l":
        w.lambda_l = {t: float(value) for t in targets}
    elif axis == "start_layer":
        w.manipulated_layers = (int(value), w.manipulated_layers[1])
    elif axis == "data_volume":
        n_per_lang = int(value)
    else:
        raise ArgumentError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    w.__post_init__()
    return cfg, n_per_lang


def _sweep_point(pretrained, spec, base_config, axis, k, value, probing_set, manip_seed, manip_n, eval_cfg,
                 out_dir):
    run_dir = os.path.join(out_dir, f"{axis}_{k:02d}_{value}") if out_dir else None
    row = {"axis": axis, "value": value}
    try:
        cfg, n = apply_axis(base_config, axis, value, spec.target_ids)
        pairs = corpus.build_manipulation_set(manip_seed, spec, n_per_lang=n or manip_n)
        model = pretrained.copy()
        rep = lens_finetune(model, probing_set, pairs, cfg, central=spec.central_id, out_dir=run_dir)
        ev = evaluate(model, rep.reference, spec, rep.subspaces, eval_cfg)
        row.update(config=cfg.echo(), status="ok", n_pairs=len(pairs), report=ev, pair_digest=_pairs_digest(pairs))
        if run_dir:
            with open(os.path.join(run_dir, "eval.json"), "w") as fh:
                fh.write(ev.to_json())
    except Exception as exc:  # noqa: BLE001 - a failed point must not stop the sweep
        log.warning("sweep point %s=%s failed: %s", axis, value, exc)
        row.update(status="error", error=f"{type(exc).__name__}: {exc}")
    return row


def run_sweep(pretrained, spec, base_config, axis, grid, probing_set, manip_seed, manip_n=200,
              eval_cfg=EvalConfig(), out_dir=None, parallel=1):
    """One LENS run + evaluation per grid value, all from the same pretrained model.

    Failed runs are recorded with their error and the sweep continues.
    ``parallel > 1`` runs points in worker processes; results keep grid order.
    Returns a list of result dicts (one per grid value).
    """
    if not grid:
        raise ArgumentError("sweep grid is empty")
    if axis not in SWEEP_AXES:
        raise ArgumentError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    args = [(pretrained, spec, base_config, axis, k, v, probing_set, manip_seed, manip_n, eval_cfg, out_dir)
            for k, v in enumerate(grid)]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            results = list(pool.map(_sweep_point, *zip(*args)))
    else:
        results = [_sweep_point(*a) for a in args]
    if out_dir:
        write_sweep_csv(results, spec, os.path.join(out_dir, "sweep.csv"))
    return results


def _pairs_digest(pairs):
    h = hashlib.sha256()
    for p in pairs:
        h.update(repr((p.target, p.semantic)).encode())
    return h.hexdigest()


def write_sweep_csv(results, spec, path):
    fields = ["axis", "value", "status"]
    fields += [f"fidelity_{l}" for l in spec.languages] + [f"nta_{l}" for l in spec.languages]
    fields += [f"retrieval_{t}" for t in spec.target_ids] + ["central_drift", "error"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in results:
            out = {"axis": r["axis"], "value": r["value"], "status": r["status"], "error": r.get("error", "")}
            ev = r.get("report")
            if ev is not None:
                for l in spec.languages:
                    out[f"fidelity_{l}"] = ev.fidelity[l]
                    out[f"nta_{l}"] = ev.next_token_accuracy[l]
                for t in spec.target_ids:
                    out[f"retrieval_{t}"] = float(np.mean(list(ev.retrieval[t].values())))
                out["central_drift"] = float(np.mean(list(ev.central_drift.values())))
            w.writerow(out)
