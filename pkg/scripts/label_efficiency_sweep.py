#!/usr/bin/env python3
"""Label-efficiency sweep: teacher vs distilled student R@3 across label
fractions, written as CSV (and a PNG when matplotlib is available)."""

import argparse
from pathlib import Path

from eviground.cohort import Cohort, CohortConfig, generate_cohort
from eviground.distill import DistillConfig, label_efficiency_experiment
from eviground.grounding import GrounderConfig
from eviground.metrics import write_rows_csv


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--cohort", help="existing cohort dir; generated if omitted")
    parser.add_argument("--out", default="label_efficiency_out")
    parser.add_argument("--fractions", default="0.15,0.25,0.5,0.75,1.0")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.cohort:
        cohort = Cohort.load(args.cohort)
    else:
        generate_cohort(CohortConfig(seed=args.seed), out / "cohort")
        cohort = Cohort.load(out / "cohort")

    fractions = [float(x) for x in args.fractions.split(",")]
    rows = label_efficiency_experiment(
        cohort,
        fractions,
        DistillConfig(seed=args.seed),
        GrounderConfig(train_decoder=False, seed=args.seed),
    )
    write_rows_csv(out / "label_efficiency.csv", rows,
                   ["fraction", "teacher_r3", "student_r3", "ratio"])
    for row in rows:
        print(f"fraction {row['fraction']:.2f}  teacher {row['teacher_r3']:.3f}  "
              f"student {row['student_r3']:.3f}  ratio {row['ratio']:.3f}")

    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        return
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([r["fraction"] for r in rows], [r["teacher_r3"] for r in rows], "o-", label="teacher")
    ax.plot([r["fraction"] for r in rows], [r["student_r3"] for r in rows], "s-", label="student")
    ax.set_xlabel("label fraction")
    ax.set_ylabel("sentence-evidence R@3")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "label_efficiency.png", dpi=120)


if __name__ == "__main__":
    main()
