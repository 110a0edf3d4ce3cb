"""Convert the UCI Adult files (adult.data + adult.test) into data/adult.csv.

Usage: python3 scripts/prepare_adult.py <dir-with-adult.data-and-adult.test> data/adult.csv

Drops the sampling-weight column (fnlwgt), strips whitespace, maps "?" to an
empty field (loaded as the "Unknown" category) and removes the trailing "."
from the income labels of adult.test.
"""
import csv
import os
import sys

COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "educationnum", "maritalstatus",
    "occupation", "relationship", "race", "sex", "capitalgain", "capitalloss",
    "hoursperweek", "nativecountry", "income",
]
KEEP = [c for c in COLUMNS if c != "fnlwgt"]


def rows(path):
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("|"):
                continue
            fields = [f.strip() for f in line.split(",")]
            if len(fields) != len(COLUMNS):
                raise ValueError(f"{path}: unexpected row {line!r}")
            rec = dict(zip(COLUMNS, fields))
            rec["income"] = rec["income"].rstrip(".")
            yield {k: ("" if rec[k] == "?" else rec[k]) for k in KEEP}


def main(src, dst):
    with open(dst, "w", newline="") as out:
        w = csv.DictWriter(out, fieldnames=KEEP, lineterminator="\n")
        w.writeheader()
        for name in ("adult.data", "adult.test"):
            for rec in rows(os.path.join(src, name)):
                w.writerow(rec)


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
