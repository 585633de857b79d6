"""Compare parameter counts of the built networks with the published table.

Writes a markdown table to docs/param_reconciliation.md (or --out).
"""
import argparse
from pathlib import Path

from volres.network import NetworkSpec, count_parameters_for

PUBLISHED = {1: 122_032, 2: 341_688, 4: 1_081_672, 8: 3_764_328, 16: 14_826_408}


def table() -> str:
    rows = [
        "| k | widths | trainable | + BN running stats | published | trainable / published |",
        "|---|---|---:|---:|---:|---:|",
    ]
    prev = None
    ratios = []
    for k, pub in PUBLISHED.items():
        pc = count_parameters_for(k)
        widths = "/".join(str(w) for w in NetworkSpec(k=k).widths)
        rows.append(
            f"| {k} | {widths} | {pc.trainable:,} | {pc.with_running_stats:,} | {pub:,} | {pc.trainable / pub:.3f} |"
        )
        if prev is not None:
            ratios.append(f"{pc.trainable / prev[0]:.2f} (published {pub / prev[1]:.2f})")
        prev = (pc.trainable, pub)
    return "\n".join(rows) + "\n\nAdjacent growth ratios: " + ", ".join(ratios) + "\n"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parents[1] / "docs" / "param_reconciliation.md")
    args = ap.parse_args()
    text = "# Parameter-count reconciliation\n\n" + table()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(text)
    print(text)


if __name__ == "__main__":
    main()
