"""Parameter and MAdds budgets of every preset, plus the ablation layouts.

Run: python3 demos/budgets.py
"""
from edgenext import ABLATIONS, ablation, count_madds, count_params, preset

print(f"{'model':<34}{'params':>12}{'MAdds@256':>16}")
for name in ("XXS", "XS", "S", "B"):
    cfg = preset(name)
    print(f"{name:<34}{count_params(cfg).params:>12,}{count_madds(cfg, 256).madds:>16,}")

print()
for name in sorted(ABLATIONS):
    cfg = ablation(name)
    print(f"{name:<34}{count_params(cfg).params:>12,}{count_madds(cfg, 256).madds:>16,}")
