#!/usr/bin/env python3
"""Mask-ratio grid: pre-train and fine-tune once per mask-budget bound and
compare test error rates."""

import argparse

from bertplm.config import parse_config
from bertplm.corpus import default_grammar, generate_corpus
from bertplm.trainer import ablate_mask_ratio


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--ratios", default="0.05,0.10,0.15,0.20")
    parser.add_argument("--unlabeled", type=int, default=400)
    parser.add_argument("--labeled", type=int, default=150)
    parser.add_argument("--seed", type=int, default=77)
    args = parser.parse_args()

    grammar = default_grammar()
    unlabeled = [u.sequence for u in generate_corpus(
        grammar, args.unlabeled, seed=700, id_prefix="unl")]
    train = generate_corpus(grammar, args.labeled, seed=701, id_prefix="tr")
    test = generate_corpus(grammar, args.labeled, seed=702, id_prefix="te")
    cfg = parse_config(None, {"profile": "tiny", "epochs": "4",
                              "finetune_epochs": "10"})

    rows = ablate_mask_ratio(unlabeled, train, test,
                             ratios=[float(r) for r in args.ratios.split(",")],
                             cfg=cfg, seed=args.seed,
                             sil_index=grammar.vocab.sil_index,
                             classes=grammar.num_classes)
    print("mask_ratio_max\terror_rate\tmacro_f1\tbest")
    for row in rows:
        print(f"{row.setting:.2f}\t{row.error_rate:.4f}"
              f"\t{row.macro_f1:.4f}\t{'*' if row.best else ''}")


if __name__ == "__main__":
    main()
