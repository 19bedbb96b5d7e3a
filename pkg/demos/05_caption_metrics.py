"""BLEU-1..4, ROUGE-L, and CIDEr-D behavior on small examples.

Walks through the classic cases: identity, clipped repetition, brevity
penalty, and what CIDEr-D's IDF weighting rewards.
"""

from dualscribe.metrics import EvalPair, bleu, cider_d, rouge_l, score_pairs
from dualscribe.text import tokenize


def pair(candidate, *references):
    return EvalPair(candidate=tokenize(candidate),
                    references=[tokenize(r) for r in references])


# Perfect predictions score 1.0 (and CIDEr-D exactly 10).
identity = [
    pair("the lungs are clear without effusion",
         "the lungs are clear without effusion"),
    pair("severe cardiomegaly is again demonstrated",
         "severe cardiomegaly is again demonstrated"),
    pair("no pneumothorax pleural effusion or edema",
         "no pneumothorax pleural effusion or edema"),
]
print("identity corpus:", score_pairs(identity))

# Clipping: repeating a correct word doesn't buy precision.
stutter = pair("the the the the the the the", "the cat is on the mat")
print(f'\n"the"x7 vs "the cat is on the mat": BLEU-1 = {bleu([stutter], 1)[0]:.6f}'
      f"  (= 2/7, clipped at the reference count)")

# Brevity penalty: a too-short candidate is multiplied down.
short = pair("lungs clear", "the lungs are well expanded and clear")
print(f"2-token candidate vs 7-token reference: BLEU-1 = {bleu([short], 1)[0]:.4f}"
      f"  (unigram precision 1.0, penalized for brevity)")

# ROUGE-L sees subsequences, not contiguous n-grams.
shuffled = pair("clear lungs no effusion", "lungs clear no effusion")
print(f"\nreordered tokens: ROUGE-L = {rouge_l([shuffled]):.4f}, "
      f"BLEU-2 = {bleu([shuffled], 2)[1]:.4f}")

# CIDEr-D: matching a rare phrase is worth more than matching boilerplate.
corpus = [
    pair("the lungs are clear", "the lungs are clear"),
    pair("the lungs are clear", "the lungs are clear"),
    pair("the lungs are clear", "the lungs are clear"),
    pair("tension pneumothorax on the left", "tension pneumothorax on the left"),
]
common_only = [
    corpus[0], corpus[1], corpus[2],
    pair("the lungs are clear", "tension pneumothorax on the left"),
]
print(f"\nCIDEr-D, rare phrase matched:   {cider_d(corpus):.4f}")
print(f"CIDEr-D, rare phrase missed:    {cider_d(common_only):.4f}")
