//! Standalone matplotlib scripts for the reproduced figures.

const SWEEP: &str = r#"import csv
import sys

import matplotlib.pyplot as plt

rows = list(csv.DictReader(open("{csv}")))
x = [float(r["value"]) for r in rows]
mean = [float(r["delta_mean"]) for r in rows]
err = [float(r["delta_stderr"]) for r in rows]
plt.errorbar(x, mean, yerr=err, marker="o", capsize=2)
plt.xlabel("{xlabel}")
plt.ylabel("observability measure delta")
plt.grid(True)
plt.savefig("{name}.png", dpi=150)
if "--show" in sys.argv:
    plt.show()
"#;

const RMSE: &str = r#"import csv
import sys
from collections import defaultdict

import matplotlib.pyplot as plt

series = defaultdict(lambda: ([], []))
for r in csv.DictReader(open("{csv}")):
    t, e = series[r["variant"]]
    t.append(float(r["time"]))
    e.append(float(r["rmse"]))
for variant, (t, e) in sorted(series.items()):
    plt.plot(t, e, label=variant.upper())
plt.xlabel("time [s]")
plt.ylabel("normalized RMSE")
plt.legend()
plt.grid(True)
plt.savefig("{name}.png", dpi=150)
if "--show" in sys.argv:
    plt.show()
"#;

const ARMSE: &str = r#"import csv
import sys
from collections import defaultdict

import matplotlib.pyplot as plt

series = defaultdict(lambda: ([], []))
for r in csv.DictReader(open("{csv}")):
    x, a = series[r["variant"]]
    x.append(float(r["value"]))
    a.append(float(r["armse"]))
for variant, (x, a) in sorted(series.items()):
    plt.plot(x, a, marker="o", label=variant.upper())
plt.xlabel("{xlabel}")
plt.ylabel("ARMSE")
plt.legend()
plt.grid(True)
plt.savefig("{name}.png", dpi=150)
if "--show" in sys.argv:
    plt.show()
"#;

fn render(template: &str, name: &str, xlabel: &str) -> String {
    template
        .replace("{csv}", &format!("{name}.csv"))
        .replace("{name}", name)
        .replace("{xlabel}", xlabel)
}

/// `(figure name, script text)` for every figure CSV.
pub fn all() -> Vec<(&'static str, String)> {
    vec![
        ("fig2a", render(SWEEP, "fig2a", "horizon N")),
        ("fig2b", render(SWEEP, "fig2b", "threshold tau")),
        ("fig5", render(RMSE, "fig5", "")),
        ("fig6a", render(ARMSE, "fig6a", "threshold tau")),
        ("fig6b", render(ARMSE, "fig6b", "noise level rho_v")),
        ("fig8", render(RMSE, "fig8", "")),
    ]
}
