"""``lens-lab`` command line: gen | probe | pretrain | enhance | eval | sweep | export-pca.

Every command takes ``--out DIR`` and writes only there, starting with the
fully resolved ``config.json``. A JSON config (``--config``) is the main
interface; ``--set section.key=value`` and ``--seed`` override it, and the
``LENS_SEED`` environment variable overrides the seed last.

Exit codes: 0 success, 1 usage or config error, 2 numerical failure,
3 I/O or file-format error.
"""

import argparse
import json
import logging
import os
import sys
import warnings

from . import config as config_mod
from . import corpus, subspace, trainer
from . import pipeline
from .errors import ArgumentError, ConfigError, FormatError, NumericalError
from .evaluation import evaluate, export_pca, write_pca_csv
from .model import ReferenceSnapshot, load_checkpoint

log = logging.getLogger("lens_lab")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class _UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2, which collides with the numeric-failure code
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageExit(f"{self.prog}: error: {message}")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args, env=None):
    """Config file + ``--seed`` + ``--set`` overrides (+ ``LENS_SEED``)."""
    doc = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.config}: top level must be a JSON object")
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not name:
            raise ArgumentError(f"--set expects section.key=value, got {item!r}")
        sec = doc.setdefault(section, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"config section {section!r} is not an object")
        sec[name] = _parse_value(value)
    return config_mod.from_dict(doc, env)


def _prepare_out(args, cfg):
    os.makedirs(args.out, exist_ok=True)
    config_mod.save(cfg, os.path.join(args.out, "config.json"))


def _run_id(args):
    return os.path.basename(os.path.normpath(args.out)) or "run"


def _load_subspaces(path):
    return {s.layer: s for s in subspace.load_subspaces(path)}


# -- commands ---------------------------------------------------------------


def cmd_gen(args, cfg):
    paths = pipeline.write_splits(cfg, args.out)
    manifest = {
        "seed": cfg.seed,
        "files": {os.path.basename(p): trainer.file_sha256(p) for p in paths},
        "counts": {"probing_per_lang": cfg.corpus.probe_n, "manipulation_per_target": cfg.corpus.manip_n,
                   "heldout": cfg.eval.n_eval},
    }
    pipeline.write_json(manifest, os.path.join(args.out, "manifest.json"))
    print(f"wrote {len(paths)} splits to {args.out}")


def cmd_probe(args, cfg):
    rank = args.rank if args.rank is not None else cfg.lens.rank
    if args.input.endswith(".ckpt"):
        model = load_checkpoint(args.input)
        spec = cfg.spec()
        if model.config.vocab != spec.vocab_size:
            raise ConfigError(f"checkpoint vocab {model.config.vocab} does not match corpus vocab {spec.vocab_size}")
        start, last = cfg.layer_range() if args.layer is None else (args.layer, args.layer)
        probing, _ = pipeline.datasets(cfg)
        subs, _ = trainer.fit_subspaces(ReferenceSnapshot(model), probing, list(range(start, last + 1)),
                                        spec.central_id, rank, args.mean_scale)
        models = [subs[l] for l in sorted(subs)]
    else:
        dump = corpus.read_embedding_dump(args.input)
        samples = {k: v.astype("float64") for k, v in dump.by_language().items()}
        means = subspace.mean_embeddings(samples, central=args.central)
        models = [subspace.probe(means, r=rank, layer=args.layer or 0, mean_scale=args.mean_scale)]
    out = os.path.join(args.out, "subspaces.json")
    subspace.save_subspaces(models if len(models) > 1 else models[0], out)
    print(f"probed {len(models)} layer(s), r={models[0].r}: {out}")


def cmd_pretrain(args, cfg):
    _, report = pipeline.pretrain_backbone(cfg, args.out)
    print(f"pretrained {len(report.rows)} steps in {report.wall_time:.1f}s, final loss "
          f"{report.rows[-1]['loss']:.4f}" if report.rows else "no pretraining steps")


def cmd_enhance(args, cfg):
    cfg.lens_weights()  # fail on missing push strengths before loading anything
    pretrained = load_checkpoint(args.checkpoint)
    data = pipeline.read_splits(args.data) if args.data else None
    model, report = pipeline.enhance(cfg, pretrained, args.out, data)
    ev = pipeline.evaluate_run(cfg, model, report)
    path = os.path.join(args.out, f"eval_{_run_id(args)}_seed{cfg.seed}.json")
    with open(path, "w") as fh:
        fh.write(ev.to_json())
    print(f"enhanced in {report.wall_time:.1f}s; fidelity {ev.fidelity}")


def cmd_eval(args, cfg):
    model = load_checkpoint(args.checkpoint)
    reference = ReferenceSnapshot(load_checkpoint(args.reference) if args.reference else model)
    if args.subspaces:
        subs = _load_subspaces(args.subspaces)
    else:
        probing, _ = pipeline.datasets(cfg)
        start, last = cfg.layer_range()
        subs, _ = trainer.fit_subspaces(reference, probing, list(range(start, last + 1)), cfg.spec().central_id,
                                        cfg.lens.rank, cfg.lens.mean_scale)
    ecfg = cfg.eval_config()
    ecfg.layers = tuple(sorted(subs))
    ev = evaluate(model, reference, cfg.spec(), subs, ecfg)
    path = os.path.join(args.out, f"eval_{_run_id(args)}_seed{cfg.seed}.json")
    with open(path, "w") as fh:
        fh.write(ev.to_json())
    print(ev.to_json())


def cmd_sweep(args, cfg):
    pretrained = load_checkpoint(args.checkpoint)
    grid = [_parse_value(v) for v in args.grid.split(",") if v.strip()]
    probing, _ = pipeline.datasets(cfg)
    results = trainer.run_sweep(pretrained, cfg.spec(), cfg.lens_config(), args.axis, grid, probing, cfg.seed,
                                cfg.corpus.manip_n, cfg.eval_config(), args.out, parallel=args.parallel)
    failed = [r for r in results if r["status"] != "ok"]
    print(f"{len(results) - len(failed)} of {len(results)} sweep points ok: {os.path.join(args.out, 'sweep.csv')}")
    for r in failed:
        print(f"  {r['axis']}={r['value']}: {r['error']}", file=sys.stderr)


def cmd_export_pca(args, cfg):
    model = load_checkpoint(args.checkpoint)
    spec = cfg.spec()
    if args.subspaces:
        subs = _load_subspaces(args.subspaces)
    else:
        probing, _ = pipeline.datasets(cfg)
        start, last = cfg.layer_range()
        subs, _ = trainer.fit_subspaces(ReferenceSnapshot(model), probing, list(range(start, last + 1)),
                                        spec.central_id, cfg.lens.rank, cfg.lens.mean_scale)
    _, held = corpus.build_heldout_set(cfg.eval.seed, spec, cfg.eval.n_eval)
    rows = []
    for layer in sorted(subs):
        for which in ("agnostic", "specific"):
            rows += export_pca(model, held, subs[layer], which, layer)
    path = os.path.join(args.out, f"pca_{_run_id(args)}_seed{cfg.seed}.csv")
    write_pca_csv(rows, path)
    print(f"wrote {len(rows)} rows to {path}")


# -- parser -----------------------------------------------------------------


def build_parser():
    p = _Parser(prog="lens-lab", description="Language subspace probing and manipulation on a toy transformer.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON run config (all fields optional)")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config field")
        return sp

    common(sub.add_parser("gen", help="write corpus splits and a manifest"))
    sp = common(sub.add_parser("probe", help="fit language subspaces from a dump or checkpoint"))
    sp.add_argument("--input", required=True, help="embedding dump (.bin/.csv) or model checkpoint (.ckpt)")
    sp.add_argument("--rank", type=int, help="specific-subspace rank (default L-1)")
    sp.add_argument("--mean-scale", choices=subspace.MEAN_SCALES, default="1/L")
    sp.add_argument("--layer", type=int, help="layer to probe (checkpoint) or to record (dump)")
    sp.add_argument("--central", help="central language id for dumps (default: first listed)")
    common(sub.add_parser("pretrain", help="pretrain the toy backbone on the language mixture"))
    sp = common(sub.add_parser("enhance", help="LENS fine-tuning of a pretrained checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", help="directory written by 'gen' (default: regenerate from the seed)")
    sp = common(sub.add_parser("eval", help="evaluate a checkpoint against a reference"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--reference", help="reference checkpoint (default: the evaluated one)")
    sp.add_argument("--subspaces", help="subspaces.json (default: probe the reference)")
    sp = common(sub.add_parser("sweep", help="one enhance+eval run per grid value"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--axis", required=True, choices=trainer.SWEEP_AXES)
    sp.add_argument("--grid", required=True, help="comma-separated values")
    sp.add_argument("--parallel", type=int, default=1, help="worker processes (default 1: sequential)")
    sp = common(sub.add_parser("export-pca", help="2-D PCA of projected held-out representations"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--subspaces", help="subspaces.json (default: probe the checkpoint)")
    return p


COMMANDS = {"gen": cmd_gen, "probe": cmd_probe, "pretrain": cmd_pretrain, "enhance": cmd_enhance,
            "eval": cmd_eval, "sweep": cmd_sweep, "export-pca": cmd_export_pca}


def main(argv=None, env=None):
    try:
        args = build_parser().parse_args(argv)
    except _UsageExit as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    warnings.simplefilter("default")
    try:
        if getattr(args, "parallel", 1) < 1:
            raise ArgumentError("--parallel must be >= 1")
        cfg = resolve_config(args, env)
        _prepare_out(args, cfg)
        COMMANDS[args.command](args, cfg)
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArgumentError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main_exit():
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
