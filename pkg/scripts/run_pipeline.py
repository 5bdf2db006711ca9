"""Full three-stage run on the synthetic corpus, then held-out TIA evaluation.

    python scripts/run_pipeline.py --out runs/main
    python scripts/run_pipeline.py --out runs/beta0 --set train.mask_loss_weight=0
"""
import argparse
import time

from tridit import config
from tridit.pipeline import run_all


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--out", required=True)
    ap.add_argument("--set", action="append", default=[], help="key=value override")
    args = ap.parse_args()
    text = open(args.config).read() if args.config else ""
    text += "".join(f"{kv}\n" for kv in args.set)
    cfg = config.parse(text)
    t0 = time.perf_counter()
    res = run_all(cfg, args.out, log=lambda m: print(m, flush=True))
    print(res.report.to_kv(), end="")
    print(f"mask_iou = {res.mask_iou:.4f}")
    print(f"sample_seconds = {res.sample_seconds:.1f}")
    print(f"total_seconds = {time.perf_counter() - t0:.1f}")


if __name__ == "__main__":
    main()
