#!/usr/bin/env python3
"""Pre-training transfer experiment: fine-tune from a pre-trained checkpoint
vs from scratch at several labeled-data fractions, averaged over seeds. The
benefit of pre-training should shrink as labeled data grows."""

import argparse

import numpy as np

from bertplm.config import parse_config
from bertplm.corpus import default_grammar, generate_corpus
from bertplm.rng import stream
from bertplm.trainer import finetune, pretrain


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--unlabeled", type=int, default=2000)
    parser.add_argument("--labeled", type=int, default=250)
    parser.add_argument("--fractions", default="0.2,0.5,1.0")
    parser.add_argument("--seeds", default="1,2,3")
    args = parser.parse_args()

    grammar = default_grammar()
    sil = grammar.vocab.sil_index
    unlabeled = [u.sequence for u in generate_corpus(
        grammar, args.unlabeled, seed=100, id_prefix="unl")]
    train = generate_corpus(grammar, args.labeled, seed=101, id_prefix="tr")
    test = generate_corpus(grammar, args.labeled, seed=102, id_prefix="te")
    cfg = parse_config(None, {"profile": "tiny", "epochs": "10",
                              "patience": "5", "finetune_epochs": "40",
                              "val_fraction": "0.2"})

    fractions = [float(f) for f in args.fractions.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    accuracy = {(f, kind): [] for f in fractions for kind in ("pre", "fresh")}
    for seed in seeds:
        ckpt = pretrain(unlabeled, cfg, seed=seed, sil_index=sil)
        order = stream(seed, "frac").permutation(len(train))
        for fraction in fractions:
            subset = [train[i] for i in order[:int(fraction * len(train))]]
            for init, kind in ((ckpt, "pre"), (None, "fresh")):
                _, metrics = finetune(init, subset, test, cfg, seed=seed,
                                      sil_index=sil, classes=grammar.num_classes)
                accuracy[(fraction, kind)].append(1.0 - metrics.error_rate)

    print("fraction\tacc_pretrained\tacc_fresh\tgap")
    for fraction in fractions:
        pre = float(np.mean(accuracy[(fraction, "pre")]))
        fresh = float(np.mean(accuracy[(fraction, "fresh")]))
        print(f"{fraction:.2f}\t{pre:.4f}\t{fresh:.4f}\t{pre - fresh:+.4f}")


if __name__ == "__main__":
    main()
