"""Per-stage D_avg of trained deep models, written as a long CSV and an SVG chart.

    python scripts/oversmoothing.py --layers 16 --target-h 0.9 --out results/smooth
"""

import argparse
import csv
from pathlib import Path

from nosaf.graph import SbmSpec, generate_sbm, make_split
from nosaf.model import ModelConfig
from nosaf.train import TrainConfig, train_once


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--target-h", type=float, default=0.9)
    ap.add_argument("--layers", type=int, default=16)
    ap.add_argument("--variants", nargs="+",
                    default=["plain_gcn", "res_gcn", "jk_sum", "nosaf", "nosaf_d"])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=500)
    ap.add_argument("--out", type=Path, default=Path("results/smooth"))
    args = ap.parse_args()

    g = generate_sbm(SbmSpec(target_h=args.target_h, seed=args.seed))
    masks = make_split(g, seed=0)
    series, rows = {}, []
    for variant in args.variants:
        cfg = TrainConfig(model=ModelConfig(variant=variant, layers=args.layers),
                          epochs=args.epochs, seeds=[args.seed])
        rec = train_once(g, masks, cfg, args.seed)
        series[variant] = rec.layer_davg
        rows += [{"variant": variant, "stage": i, "davg": d} for i, d in enumerate(rec.layer_davg)]
        print(f"{variant:10s} acc={rec.test_accuracy_at_best_val:.4f} "
              + " ".join(f"{d:.3f}" for d in rec.layer_davg), flush=True)

    args.out.mkdir(parents=True, exist_ok=True)
    with open(args.out / "davg_by_stage.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["variant", "stage", "davg"], lineterminator="\r\n")
        writer.writeheader()
        writer.writerows(rows)
    from nosaf.plots import davg_by_layer_svg
    davg_by_layer_svg(args.out / "davg_by_stage.svg", series)


if __name__ == "__main__":
    main()
