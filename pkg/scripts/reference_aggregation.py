"""Recompute the MEAN±std row of the published tool-presence table from its per-tool APs."""

from toolpresence.data_ingest import TOOLS
from toolpresence.metrics_eval import mean_ap, round1

COLUMNS = {
    "ToolNet-m2cai16": ([82.2, 50.3, 89.4, 17.0, 43.6, 12.5, 72.2], "52.5±30.5"),
    "ToolNet-Cholec80": ([86.0, 69.1, 94.2, 51.9, 63.0, 65.1, 88.6], "73.9±15.7"),
    "EndoNet-Cholec80": ([87.0, 68.7, 93.9, 52.8, 66.5, 63.0, 87.3], "74.2±15.3"),
}


def main():
    names = list(COLUMNS)
    print(f"{'Tool':<13}" + "".join(f"{n:>18}" for n in names))
    for i, tool in enumerate(TOOLS):
        print(f"{tool:<13}" + "".join(f"{COLUMNS[n][0][i]:>18.1f}" for n in names))
    computed = {}
    for n in names:
        m, s = mean_ap(COLUMNS[n][0])
        computed[n] = f"{round1(m)}±{round1(s)}"
    print(f"{'MEAN':<13}" + "".join(f"{computed[n]:>18}" for n in names))
    print(f"{'published':<13}" + "".join(f"{COLUMNS[n][1]:>18}" for n in names))
    for n in names:
        if computed[n] != COLUMNS[n][1]:
            m, _ = mean_ap(COLUMNS[n][0])
            print(f"note: {n} per-tool values average to {m:.4f}, printed as {COLUMNS[n][1]}")


if __name__ == "__main__":
    main()
