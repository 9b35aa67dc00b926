"""The default toy pipeline as plain functions over a :class:`RunConfig`.

Used by the command line, the demos and the acceptance suite, so that all
three run exactly the same sequence: generate data, pretrain the backbone,
enhance it, evaluate.
"""

import json
import os

from . import corpus, trainer
from .evaluation import evaluate
from .model import ToyTransformer


def datasets(cfg):
    """``(probing_set, manipulation_pairs)`` for the config's seed."""
    spec = cfg.spec()
    probing = corpus.build_probing_set(cfg.seed, spec, cfg.corpus.probe_n)
    pairs = corpus.build_manipulation_set(cfg.seed, spec, n_per_lang=cfg.corpus.manip_n)
    return probing, pairs


def pretrain_backbone(cfg, out_dir=None):
    """Fresh model pretrained on the configured mixture; returns ``(model, report)``."""
    model = ToyTransformer(cfg.model_config())
    report = trainer.pretrain(model, cfg.spec(), cfg.pretrain_config(), cfg.corpus.resolved_mixture(),
                              cfg.corpus.switch_hazard, out_dir)
    return model, report


def enhance(cfg, pretrained, out_dir=None, data=None):
    """LENS fine-tuning of a copy of ``pretrained``; returns ``(model, report)``.

    ``data`` is an optional ``(probing_set, pairs)`` tuple overriding the
    config-seeded splits.
    """
    probing, pairs = data or datasets(cfg)
    model = pretrained.copy()
    report = trainer.lens_finetune(model, probing, pairs, cfg.lens_config(), central=cfg.spec().central_id,
                                   out_dir=out_dir)
    return model, report


def evaluate_run(cfg, model, report):
    return evaluate(model, report.reference, cfg.spec(), report.subspaces, cfg.eval_config())


def write_json(doc, path):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def pairs_to_json(pairs):
    return [
        {"semantic": list(p.semantic), "target": p.target, "central": p.central,
         "target_tokens": p.target_tokens, "central_tokens": p.central_tokens}
        for p in pairs
    ]


def pairs_from_json(doc):
    return [
        corpus.ParallelPair(tuple(d["semantic"]), d["target"], d["central"], list(d["target_tokens"]),
                            list(d["central_tokens"]))
        for d in doc
    ]


def write_splits(cfg, out_dir):
    """Probing, manipulation and held-out splits as JSON; returns the file paths."""
    spec = cfg.spec()
    probing, pairs = datasets(cfg)
    sems, held = corpus.build_heldout_set(cfg.eval.seed, spec, cfg.eval.n_eval)
    files = {
        "probing.json": probing,
        "manipulation.json": pairs_to_json(pairs),
        "heldout.json": {"semantic": [list(s) for s in sems], "rendered": held},
    }
    paths = []
    for name, doc in files.items():
        path = os.path.join(out_dir, name)
        with open(path, "w") as fh:
            json.dump(doc, fh, separators=(",", ":"))
        paths.append(path)
    return paths


def read_splits(data_dir):
    """Inverse of :func:`write_splits` for the training splits."""
    with open(os.path.join(data_dir, "probing.json")) as fh:
        probing = {k: [list(s) for s in v] for k, v in json.load(fh).items()}
    with open(os.path.join(data_dir, "manipulation.json")) as fh:
        pairs = pairs_from_json(json.load(fh))
    return probing, pairs
