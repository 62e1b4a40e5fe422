"""Baseline contact task: 60 s of force regulation against a compliant plane.

Prints the force and task errors every 5 s and the run summary.
Usage: python demos/scenario.py [config.toml]
"""
import sys

import numpy as np

from fbcbf.config import ScenarioConfig, load_config
from fbcbf.kin_cbf import CHANNELS
from fbcbf.sim import run_scenario, summarize

cfg = load_config(sys.argv[1]) if len(sys.argv) > 1 else ScenarioConfig()
log = run_scenario(cfg)
summary = summarize(log, cfg)

print("   t      f    " + "  ".join(f"{'e_' + c:>7}" for c in CHANNELS) + "     b_k")
for k in range(0, len(log), int(round(5.0 / cfg.sim.dt / cfg.sim.log_every))):
    e = log.errors[k]
    print(f"{log.t[k]:5.1f}  {log.col('f')[k]:5.3f}  " + "  ".join(f"{v:+7.4f}" for v in e)
          + f"  {log.col('b_k')[k]:.5f}")

print()
for key in ("safe", "min_f", "max_f", "safety_violation_steps", "contact_lost_steps",
            "kin_filter_active_steps", "torque_filter_active_steps"):
    print(f"{key:28s} {summary[key]}")
print("max |e|", np.round(np.abs(log.errors).max(axis=0), 4))
