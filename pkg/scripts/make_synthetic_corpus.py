#!/usr/bin/env python3
"""Generate a templated synthetic corpus with ground-truth section labels.

Writes the standard corpus JSON-lines file plus a labels sidecar, ready for
`planlm ingest --input <corpus.jsonl>`.
"""

import argparse
from pathlib import Path

from planlm.corpus import save_articles_jsonl
from planlm.synthdata import default_grammar, generate_corpus, save_labels


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, required=True,
                        help="output corpus .jsonl path")
    parser.add_argument("--articles", type=int, default=2000)
    parser.add_argument("--sentences", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--p-next", type=float, default=0.8,
                        help="probability of advancing to the next section")
    parser.add_argument("--p-skip", type=float, default=0.1)
    parser.add_argument("--p-stay", type=float, default=0.1)
    args = parser.parse_args()

    grammar = default_grammar(seed=args.seed, p_next=args.p_next,
                              p_skip=args.p_skip, p_stay=args.p_stay)
    articles, labels = generate_corpus(grammar, args.articles, args.sentences)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_articles_jsonl(articles, args.out)
    labels_path = args.out.with_name(args.out.stem + "_labels.jsonl")
    save_labels(labels, labels_path)
    print(f"wrote {len(articles)} articles to {args.out}")
    print(f"wrote labels to {labels_path}")


if __name__ == "__main__":
    main()
