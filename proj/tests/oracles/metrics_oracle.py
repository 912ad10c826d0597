"""Brute-force reference scores for the metric golden corpus.

Every count is obtained by enumerating windows and subsequences directly,
without sharing any code or algorithm with the C++ implementation.

    python3 metrics_oracle.py golden.jsonl            # print scores
    python3 metrics_oracle.py golden.jsonl --check expected.json
"""

import argparse
import itertools
import json
import math
import string
import sys


def tokenize(text):
    out, cur = [], ""
    for ch in text:
        if ch.isspace():
            if cur:
                out.append(cur)
            cur = ""
        elif ch in string.punctuation:
            if cur:
                out.append(cur)
            out.append(ch)
            cur = ""
        else:
            cur += ch.lower()
    if cur:
        out.append(cur)
    return out


def windows(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def clipped_overlap(hyp, ref, n):
    hw, rw = windows(hyp, n), windows(ref, n)
    return sum(min(hw.count(g), rw.count(g)) for g in set(hw))


def bleu(pairs, max_n):
    log_sum = 0.0
    for n in range(1, max_n + 1):
        matched = sum(clipped_overlap(h, r, n) for h, r in pairs)
        total = sum(len(windows(h, n)) for h, _ in pairs)
        if matched == 0 or total == 0:
            return 0.0
        log_sum += math.log(matched / total)
    hyp_len = sum(len(h) for h, _ in pairs)
    ref_len = sum(len(r) for _, r in pairs)
    bp = math.exp(min(0.0, 1.0 - ref_len / hyp_len))
    return bp * math.exp(log_sum / max_n)


def f1(overlap, hyp_total, ref_total):
    if overlap == 0 or hyp_total == 0 or ref_total == 0:
        return 0.0
    p, r = overlap / hyp_total, overlap / ref_total
    return 2 * p * r / (p + r)


def rouge_n(pairs, n):
    scores = [f1(clipped_overlap(h, r, n), len(windows(h, n)), len(windows(r, n))) for h, r in pairs]
    return sum(scores) / len(scores)


def is_subsequence(sub, seq):
    it = iter(seq)
    return all(tok in it for tok in sub)


def lcs_brute(a, b):
    for k in range(len(a), 0, -1):
        for idx in itertools.combinations(range(len(a)), k):
            if is_subsequence([a[i] for i in idx], b):
                return k
    return 0


def rouge_l(pairs):
    scores = [f1(lcs_brute(h, r), len(h), len(r)) for h, r in pairs]
    return sum(scores) / len(scores)


def distinct(hyps, n):
    grams = [g for h in hyps for g in windows(h, n)]
    return len(set(grams)) / len(grams) if grams else 0.0


def meteor_lite(pairs):
    total = 0.0
    for hyp, ref in pairs:
        taken = set()
        alignment = []  # (hyp index, ref index)
        for i, tok in enumerate(hyp):
            for j, rtok in enumerate(ref):
                if j not in taken and rtok == tok:
                    taken.add(j)
                    alignment.append((i, j))
                    break
        m = len(alignment)
        if m == 0:
            continue
        chunks = 1
        for (i0, j0), (i1, j1) in zip(alignment, alignment[1:]):
            if not (i1 == i0 + 1 and j1 == j0 + 1):
                chunks += 1
        p, r = m / len(hyp), m / len(ref)
        fmean = 10 * p * r / (r + 9 * p)
        total += fmean * (1 - 0.5 * (chunks / m) ** 3)
    return total / len(pairs)


def scores(path):
    pairs = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                pairs.append((tokenize(rec["hyp"]), tokenize(rec["ref"])))
    hyps = [h for h, _ in pairs]
    return {
        "bleu1": bleu(pairs, 1),
        "bleu2": bleu(pairs, 2),
        "rouge2": rouge_n(pairs, 2),
        "rougeL": rouge_l(pairs),
        "distinct1": distinct(hyps, 1),
        "distinct2": distinct(hyps, 2),
        "meteor_lite": meteor_lite(pairs),
        "pairs": len(pairs),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("golden")
    ap.add_argument("--check", help="compare against a frozen expected file")
    args = ap.parse_args()
    got = scores(args.golden)
    if not args.check:
        print(json.dumps(got, indent=2))
        return 0
    with open(args.check, encoding="utf-8") as f:
        want = json.load(f)
    bad = [k for k in want if abs(want[k] - got[k]) > 1e-12]
    for k in bad:
        print(f"{k}: frozen {want[k]!r} oracle {got[k]!r}", file=sys.stderr)
    return 1 if bad else 0


if __name__ == "__main__":
    sys.exit(main())
