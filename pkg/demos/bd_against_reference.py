"""Bjontegaard deltas between two RD curves, plus the bundled reference table.

    python3 demos/bd_against_reference.py
"""

from sigvic.bd import RDCurve, RDPoint, bd_metrics, load_reference_bd

anchor = RDCurve([RDPoint(b, q) for b, q in [(0.12, 27.1), (0.25, 29.6), (0.48, 32.2), (0.86, 35.0)]], "anchor")
# same quality at 15% fewer bits, with a small extra gain at high rate
test = RDCurve([RDPoint(p.bpp * 0.85, p.quality + 0.1 * i) for i, p in enumerate(anchor.points)], "test")

rate, quality = bd_metrics(anchor, test)
print(f"test vs anchor: BD-Rate {rate:+.2f}%  BD-PSNR {quality:+.3f} dB")

print("\nreference results against BPG:")
for row in load_reference_bd():
    print(f"  {row.method:<28} {row.dataset:<8} {row.formatted()}")
