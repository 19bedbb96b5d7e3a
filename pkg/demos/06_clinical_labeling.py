"""Rule-based condition labeling and the clinical F1 breakdown.

Labels a few reports by hand, then scores predicted-vs-truth report lists
the way the evaluation harness does.
"""

from dualscribe.labeler import (
    CONDITIONS,
    Label,
    chexbert_f1_report,
    label_report,
)

EXAMPLES = [
    "Severe cardiomegaly and stable hilar contours.",
    "In particular no evidence of pneumonia.",
    "There may be evidence of pulmonary edema.",
    "Left chest wall pacemaker with leads in place.",
]

for text in EXAMPLES:
    labels = label_report(text)
    shown = {c.value: l.value for c, l in labels.items() if l != Label.BLANK}
    print(f"{text!r}\n  -> {shown}")

truth = [
    "there is evidence of cardiomegaly .",
    "there is no evidence of pneumonia .",
    "findings are consistent with cardiomegaly . there is evidence of pulmonary edema .",
    "there may be evidence of pneumonia .",
    "stable appearance of the chest .",
    "there is evidence of pneumonia .",
]
pred = [
    "there is evidence of cardiomegaly .",
    "there is evidence of pneumonia .",
    "there is no evidence of cardiomegaly .",
    "there is evidence of pneumonia .",
    "stable appearance of the chest .",
    "there is evidence of pneumonia .",
]

report = chexbert_f1_report(pred, truth)
print(f"\noverall F1 ({report.averaging} over all 14 conditions): "
      f"{report.overall_f1:.4f} on {report.n_reports} reports")
print(f"{'condition':<28} {'F1':>6} {'freq':>6}  TP FP FN TN")
for cond in CONDITIONS:
    if not report.support[cond] and report.frequencies[cond] == 0.0:
        continue
    tp, fp, fn, tn = report.counts[cond]
    print(f"{cond.value:<28} {report.per_condition_f1[cond]:>6.3f} "
          f"{report.frequencies[cond]:>6.3f}  {tp:>2} {fp:>2} {fn:>2} {tn:>2}")
