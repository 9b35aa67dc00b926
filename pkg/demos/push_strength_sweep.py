"""Sweep the push strength and the retention weight on one backbone.

    python demos/push_strength_sweep.py     # about 4 minutes on one core
"""

import numpy as np

from lens_lab import config, pipeline, trainer

cfg = config.from_dict({})
spec = cfg.spec()
backbone, _ = pipeline.pretrain_backbone(cfg)
probing, _ = pipeline.datasets(cfg)

for axis, grid in (("lambda_l", [0.0, 0.5, 1.0]), ("lambda3", [0.0, 1.0])):
    print(f"\n{axis}")
    rows = trainer.run_sweep(backbone, spec, cfg.lens_config(), axis, grid, probing, cfg.seed,
                             cfg.corpus.manip_n, cfg.eval_config())
    for r in rows:
        ev = r["report"]
        fid = " ".join(f"{t}={ev.fidelity[t]:.2f}" for t in spec.target_ids)
        drift = np.mean(list(ev.central_drift.values()))
        print(f"  {r['value']:<5} fidelity {fid}  central fidelity {ev.fidelity[spec.central_id]:.2f}  "
              f"central drift {drift:.3f}")
