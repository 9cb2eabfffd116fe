"""Channel (transposed) attention versus spatial self-attention as the token count grows.

The analytic columns are exact; pass --timing to also measure both on this machine.

Run: python3 demos/attention_scaling.py [--timing]
"""
import sys

from edgenext import analysis

timing = "--timing" in sys.argv
rows = analysis.attention_scaling_probe(128, 4, [16, 32, 64, 128] if timing else [16, 32, 64, 128, 256], timing=timing, repeats=1)
print(analysis.format_probe(rows, 128, 4), end="")
if timing:
    xca, mhsa = analysis.timing_ratios(rows[-2:])
    print(f"# 64->128 wall-clock ratios: xca {xca:.2f}, spatial {mhsa:.2f}")
