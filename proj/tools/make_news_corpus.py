#!/usr/bin/env python3
"""Builds the news-style CoNLL-U test corpus.

Sentences come from the Penn Treebank WSJ language-modeling text (PyPI
package `treebank`) and are parsed with a spaCy English pipeline, whose
labels follow the Stanford/ClearNLP scheme (nsubj, dobj, amod, ...).

    pip install "spacy>=3.7.5,<3.9" en-core-web-sm-vbspacy treebank
    python tools/make_news_corpus.py --count 3000 > tests/data/news.conllu

With --text the selected split is written as plain tokenized sentences, one
per line, without parsing (used as held-out BLEU references):

    python tools/make_news_corpus.py --split valid --text > tests/data/news_valid.txt
"""
import argparse
import sys

import spacy
import treebank
from spacy.tokens import Doc


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--count", type=int, default=3000)
    ap.add_argument("--split", default="train")
    ap.add_argument("--model", default="en_core_web_sm_vbspacy")
    ap.add_argument("--text", action="store_true", help="write plain sentences, skip parsing")
    args = ap.parse_args()

    lines = treebank.penn[args.split].splitlines()[1:]
    lines = [l.strip().replace("<unk>", "unk") for l in lines if l.strip()]
    if args.text:
        for line in lines:
            if len(line.split()) >= 3:
                sys.stdout.write(line + "\n")
        return

    nlp = spacy.load(args.model)

    out = sys.stdout
    written = 0
    # The source text is already tokenized one sentence per line; keep both.
    def docs():
        for line in lines:
            words = line.split()
            doc = Doc(nlp.vocab, words=words)
            for i, tok in enumerate(doc):
                tok.is_sent_start = i == 0
            yield doc

    for doc in nlp.pipe(docs(), batch_size=256):
        for sent in doc.sents:
            toks = [t for t in sent if not t.is_space]
            if len(toks) < 3:
                continue
            base = sent.start
            out.write(f"# sent_id = {written + 1}\n")
            out.write(f"# text = {sent.text}\n")
            for t in toks:
                head = 0 if t.head.i == t.i else t.head.i - base + 1
                dep = "root" if t.dep_ == "ROOT" else t.dep_
                out.write(f"{t.i - base + 1}\t{t.text}\t_\t_\t_\t_\t{head}\t{dep}\t_\t_\n")
            out.write("\n")
            written += 1
            if written >= args.count:
                return


if __name__ == "__main__":
    main()
