"""
Spike descent from the worst constant control
=============================================

Use maximum-principle violations as search directions and compare the end
point with the exhaustive tree optimum.
"""

from goodwill.harness import bundled_config, load_config, run_command

# the bundled tiny_tree config: four steps, tree noise, start at the worst constant
cfg = load_config(bundled_config("tiny_tree"))
art = run_command(cfg, out_root="demo_out")

print(art.files["descent_trace.csv"].read_text())
res = art.summary["results"]
print("stop reason:", res["stop_reason"])
print("final cost :", res["final_cost_mean"])
print("oracle cost:", res["oracle_best_cost"], res["oracle_best_control"])
print("artifacts in", art.out_dir)

# Raising the control cost to 2 u^2 gives a case where descent halts at a
# control that satisfies the pointwise condition but is not the optimum.
stalled = run_command(cfg.replace(**{"cost.c.alpha": 2.0}), out_root="demo_out")
r = stalled.summary["results"]
print("c = 2u^2:", r["stop_reason"], r["final_cost_mean"], "vs oracle", r["oracle_best_cost"])
