"""Regenerates the CSV fixtures in this directory (deterministic)."""
import csv
import datetime as dt
import random
from pathlib import Path

HERE = Path(__file__).resolve().parent
AGE_EDGES = [0, 20, 40, 60, 120]


def write(name, header, rows):
    with open(HERE / name, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def grid_regions(side, prefix, rng, with_ages):
    rows = []
    for k in range(side * side):
        x, y = k % side, k // side
        pop = rng.randint(40, 160) * 1000
        row = [f"{prefix}{k:02d}", f"Region {k:02d}", pop, x, y, round(rng.uniform(0, 1), 3)]
        if with_ages:
            a = [rng.uniform(0.5, 1.5) for _ in range(len(AGE_EDGES) - 1)]
            s = sum(a)
            shares = [round(v / s, 6) for v in a]
            shares[-1] = round(1 - sum(shares[:-1]), 6)
            row += shares
        rows.append(row)
    return rows


def region_header(with_ages):
    h = ["region_id", "name", "population", "x", "y", "covariate"]
    if with_ages:
        h += [f"age_{lo}_{hi}" for lo, hi in zip(AGE_EDGES, AGE_EDGES[1:])]
    return h


def case_rows(n, regions, rng, start=dt.date(2020, 1, 5)):
    ids = [r[0] for r in regions]
    # Over-sample low-index regions, as a convenience sample would.
    bias = [1.0 / (1 + 0.08 * i) for i in range(len(ids))]
    rows = []
    for i in range(n):
        region = ids[i] if i < len(ids) else rng.choices(ids, weights=bias)[0]
        onset = start + dt.timedelta(days=rng.randint(0, 30))
        cutoff = dt.date(2020, 1, 18)
        delay = rng.randint(0, 9) if onset < cutoff else rng.randint(0, 5)
        care = "" if rng.random() < 0.06 else (onset + dt.timedelta(days=delay)).isoformat()
        age = min(120, max(0, round(rng.gauss(47, 16))))
        sex = rng.choice(["M", "F", "F", "M", "unknown"]) if rng.random() < 0.95 else ""
        traveler = 1 if rng.random() < 0.15 else 0
        group = "east" if int(region[-2:]) % 6 >= 3 else "west"
        rows.append([f"c{i + 1:04d}", region, age, sex, onset.isoformat(), care, traveler, group])
    return rows


CASE_HEADER = ["case_id", "region_id", "age", "sex", "onset_date", "care_date", "traveler", "group_label"]


def main():
    rng = random.Random(20200118)
    regions = grid_regions(6, "p", rng, with_ages=True)
    write("regions_grid.csv", region_header(True), regions)
    write("cases_507.csv", CASE_HEADER, case_rows(507, regions, rng))

    # Observed allocation equals the proportional design: all ps = 1.
    small = [["a", "Alpha", 100, 0, 0, ""], ["b", "Beta", 200, 1, 0, ""],
             ["c", "Gamma", 300, 0, 1, ""], ["d", "Delta", 400, 1, 1, ""]]
    write("regions_small.csv", region_header(False), small)
    balanced, k = [], 0
    for rid, count in (("a", 1), ("b", 2), ("c", 3), ("d", 4)):
        for j in range(count):
            k += 1
            balanced.append([f"b{k:02d}", rid, 20 + 3 * k, "F", "2020-01-10", f"2020-01-{11 + j:02d}", k % 2,
                             "x" if rid in "ab" else "y"])
    write("cases_balanced.csv", CASE_HEADER, balanced)
    write("cases_uncovered.csv", CASE_HEADER, [r for r in balanced if r[1] != "d"])

    # 4x4 checkerboard: region means alternate 30 / 50.
    board = [[f"q{k:02d}", f"Cell {k:02d}", 1000, k % 4, k // 4, ""] for k in range(16)]
    write("regions_checkerboard.csv", region_header(False), board)
    cells = []
    for k in range(16):
        base = 30 if (k % 4 + k // 4) % 2 == 0 else 50
        for j, age in enumerate((base - 1, base + 1)):
            cells.append([f"k{k:02d}{j}", f"q{k:02d}", age, "M", "2020-01-10", "2020-01-12", 0, ""])
    write("cases_checkerboard.csv", CASE_HEADER, cells)

    # Two groups with delays {1,2} and {3,4}.
    tiny = []
    for i, (delay, grp) in enumerate(((1, "x"), (2, "x"), (3, "y"), (4, "y"))):
        tiny.append([f"t{i}", "a", 30, "M", "2020-01-10", f"2020-01-{10 + delay:02d}", 0, grp])
    write("cases_tiny.csv", CASE_HEADER, tiny)

    # Dirty rows: care before onset, bad date, duplicate id, age out of range.
    dirty = balanced[:3] + [
        ["z1", "a", 34, "M", "2020-01-10", "2020-01-09", 0, ""],
        ["z2", "a", 34, "M", "2020-13-10", "", 0, ""],
        ["b01", "a", 34, "M", "2020-01-10", "", 0, ""],
        ["z3", "a", 130, "M", "2020-01-10", "", 0, ""],
    ]
    write("cases_dirty.csv", CASE_HEADER, dirty)


if __name__ == "__main__":
    main()
