#!/usr/bin/env python3
"""Desk-scale pre-training demo: synthesize a corpus, pre-train the tiny
encoder, print the held-out masked-loss trajectory."""

import argparse

from bertplm.config import parse_config
from bertplm.corpus import default_grammar, generate_corpus
from bertplm.trainer import ProgressLog, pretrain, save_checkpoint


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--utterances", type=int, default=2000)
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="tiny-pretrained.ckpt")
    args = parser.parse_args()

    grammar = default_grammar()
    corpus = [u.sequence for u in generate_corpus(grammar, args.utterances,
                                                  seed=args.seed)]
    cfg = parse_config(None, {"profile": "tiny", "epochs": str(args.epochs)})
    log = ProgressLog()
    ckpt = pretrain(corpus, cfg, seed=args.seed,
                    sil_index=grammar.vocab.sil_index, log=log,
                    checkpoint_path=args.out)
    save_checkpoint(args.out, ckpt.arrays, cfg, ckpt.step, ckpt.optim)

    held = [(step, value) for step, split, _, value in log.records
            if split == "heldout"]
    print("step\theldout_plm_loss")
    for step, value in held:
        print(f"{step}\t{value:.4f}")
    first, last = held[0][1], held[-1][1]
    print(f"drop: {100 * (first - last) / first:.1f}% "
          f"({first:.4f} -> {last:.4f}); checkpoint at {args.out}")


if __name__ == "__main__":
    main()
