"""Run the desk-scale VP / SF / SSF ablation and print its tables.

    python scripts/run_toy_ablation.py --seed 0 --out results/toy_seed0.md
"""

import argparse
import json
import logging
from dataclasses import replace
from pathlib import Path

import torch

from slicesr.experiments import ToySuite, run_toy_ablation
from slicesr.metrics import ablation_markdown, table_markdown


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--with-sf-ssf", action="store_true", help="also run SSF directly on top of SF")
    ap.add_argument("--out", help="write the Markdown tables here")
    ap.add_argument("--json", help="write per-method summaries here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)

    suite = replace(ToySuite(), seed=args.seed)
    result = run_toy_ablation(suite, include_sf_ssf=args.with_sf_ssf)
    table = table_markdown(list(result.reports.items()), f"Toy suite, seed {args.seed}")
    ablation = ablation_markdown([(result.flags[k], r) for k, r in result.reports.items() if k in result.flags],
                                 "Ablation (VP = video pre-training, SF = supervised, SSF = self-supervised)")
    text = table + "\n" + ablation
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    if args.json:
        summary = {k: {**r.summary(), "seconds": result.seconds.get(k)} for k, r in result.reports.items()}
        Path(args.json).write_text(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
