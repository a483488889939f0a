import csv
import glob
import json


def load_one(pattern):
    paths = sorted(glob.glob(pattern))
    if len(paths) != 1:
        raise SystemExit("expected exactly one input matching %s, found %d" % (pattern, len(paths)))
    return paths[0]


def read_rows(pattern):
    with open(load_one(pattern), newline="") as f:
        return list(csv.DictReader(f))


def read_json(pattern):
    with open(load_one(pattern)) as f:
        return json.load(f)


# Phase 1: data preparation
turbine_rows = read_rows("inputs/TURBINE_DATA_*.csv")
weather_rows = read_rows("inputs/WEATHER_DATA_*.csv")
thresholds = read_json("inputs/THRESHOLDS_*.json")
curve = read_json("inputs/POWER_CURVE_*.json")

wind = {}
for row in weather_rows:
    wind[row["timestamp"]] = float(row["wind_speed"])

cut_in = curve["cut_in_ms"]
rated = curve["rated_ms"]
cut_out = curve["cut_out_ms"]
rated_kw = curve["rated_power_kw"]
lo = cut_in * cut_in * cut_in
hi = rated * rated * rated


def expected_kw(v):
    if v < cut_in or v >= cut_out:
        return 0.0
    if v >= rated:
        return rated_kw
    return rated_kw * (v * v * v - lo) / (hi - lo)


# Phase 2: performance metrics
sums = {}
for row in turbine_rows:
    ts = row["timestamp"]
    if ts not in wind:
        continue
    tid = row["turbine_id"]
    if tid not in sums:
        sums[tid] = [0.0, 0.0, 0]
    acc = sums[tid]
    acc[0] += float(row["power_output"])
    acc[1] += expected_kw(wind[ts])
    acc[2] += 1

results = []
for tid in sorted(sums):
    actual, expected, n = sums[tid]
    mean_power = actual / n
    mean_expected = expected / n
    efficiency = mean_power / mean_expected if mean_expected > 0.0 else 0.0
    results.append((tid, efficiency, mean_power, mean_expected, n))

# Phase 3: benchmark comparison
excellent_min = thresholds["excellent_min"]
good_min = thresholds["good_min"]


def band(e):
    if e >= excellent_min:
        return "excellent"
    if e >= good_min:
        return "good"
    return "maintenance"


results.sort(key=lambda r: (-r[1], r[0]))

with open("outputs/ranking.csv", "w", newline="") as f:
    w = csv.writer(f, lineterminator="\n")
    w.writerow(["rank", "turbine_id", "efficiency", "band", "mean_power_kw", "expected_power_kw", "readings"])
    for i, (tid, eff, mean_power, mean_expected, n) in enumerate(results):
        w.writerow([i + 1, tid, repr(eff), band(eff), repr(mean_power), repr(mean_expected), n])

print("ranked %d turbines" % len(results))
