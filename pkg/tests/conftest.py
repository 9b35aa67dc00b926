import os
import sys

sys.path.insert(0, os.path.dirname(__file__))

import pytest

# small enough for a full pretrain + enhance in a couple of seconds
TINY = {
    "corpus": {"semantic_vocab_size": 12, "ctx": 16, "max_len": 8, "probe_n": 20, "manip_n": 16},
    "model": {"d_model": 16, "n_layers": 3, "n_heads": 2, "d_ff": 32},
    "train": {"pretrain_steps": 60, "pretrain_batch": 8, "lens_batch": 4},
    "eval": {"n_eval": 12, "max_new": 4, "retrieval_len": 6},
}


@pytest.fixture
def tiny_doc():
    import copy

    return copy.deepcopy(TINY)


@pytest.fixture(scope="session")
def tiny_pretrained():
    from lens_lab import config, pipeline

    model, _ = pipeline.pretrain_backbone(config.from_dict(TINY, env={}))
    return model


# one pass/fail line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def default_run(tmp_path_factory):
    """Seeded default pipeline: pretrain, enhance, evaluate before and after."""
    import time

    from lens_lab import config, pipeline
    from lens_lab.evaluation import evaluate
    from lens_lab.model import ReferenceSnapshot

    root = tmp_path_factory.mktemp("default")
    cfg = config.from_dict({}, env={})
    t0 = time.time()
    pretrained, pre_report = pipeline.pretrain_backbone(cfg, str(root / "pre"))
    enhanced, report = pipeline.enhance(cfg, pretrained, str(root / "run"))
    ev = pipeline.evaluate_run(cfg, enhanced, report)
    wall = time.time() - t0
    base = evaluate(pretrained, ReferenceSnapshot(pretrained), cfg.spec(), report.subspaces, cfg.eval_config())
    return dict(cfg=cfg, root=root, pretrained=pretrained, pre_report=pre_report, enhanced=enhanced,
                report=report, ev=ev, base=base, wall=wall)
