"""Force reference swinging towards the corridor limits.

As the oscillation grows, the force-error band shrinks to keep the corridor
conditions and the kinematic filter starts to clip the force command.
"""
import numpy as np

from fbcbf.config import ScenarioConfig, validate
from fbcbf.sim import run_scenario, summarize

base = ScenarioConfig().replace(**{"sim.duration": 10.0, "initial.force": 1.0, "reference.force.period": 2.0})
print(" amp   band        safe  kin_active  min margin")
for amp in (0.0, 0.2, 0.3, 0.4):
    cfg = base.replace(**{"reference.force.amplitude": amp})
    assert all(c.ok for c in validate(cfg))
    lo, hi = cfg.force_limits()
    log = run_scenario(cfg)
    s = summarize(log, cfg)
    e_f = log.col("e_f")
    margin = np.minimum(e_f + lo, hi - e_f).min()
    print(f"{amp:4.1f}  [-{lo:.2f}, {hi:.2f}]  {s['safe']!s:5s}  {s['kin_filter_active_steps']:10d}  {margin:.4f}")
