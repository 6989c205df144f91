//! Standalone matplotlib scripts. Each reads the CSVs next to it and writes a PNG.

pub const FIELDS: &str = r#"import csv
import matplotlib.pyplot as plt


def load(name):
    rows = {}
    with open(name) as fh:
        next(fh)
        for k, n, v in csv.reader(fh):
            rows.setdefault(int(k), {})[int(n)] = float(v)
    return rows


fig, axes = plt.subplots(1, 2, figsize=(10, 4))
y = load("y.csv")
nodes = sorted(y)
levels = sorted(y[nodes[0]])
axes[0].imshow([[y[k][n] for k in nodes] for n in levels], origin="lower", aspect="auto")
axes[0].set_title("y (rows: time level)")
v = load("v.csv")
for k in sorted(v):
    axes[1].plot(sorted(v[k]), [v[k][n] for n in sorted(v[k])], label=f"node {k}")
axes[1].set_title("boundary control v")
axes[1].set_xlabel("time level")
if len(v) <= 8:
    axes[1].legend()
fig.tight_layout()
fig.savefig("fields.png", dpi=150)
"#;

pub const TRACE: &str = r#"import csv
import matplotlib.pyplot as plt

with open("trace.csv") as fh:
    rows = list(csv.DictReader(fh))
k = [int(r["k"]) for r in rows]
d = [float(r["d_k"]) for r in rows]
plt.semilogy(k, d, "o-")
plt.xlabel("k")
plt.ylabel("d_k")
plt.title("fixed-point increments")
plt.savefig("trace.png", dpi=150)
"#;

pub const CARLEMAN: &str = r#"import csv
import matplotlib.pyplot as plt

with open("carleman.csv") as fh:
    rows = [r for r in csv.DictReader(fh) if r["sample"] != "max"]
plt.hist([float(r["ratio"]) for r in rows], bins=20)
plt.xlabel("lhs / rhs")
plt.title("Carleman ratio over random dual fields")
plt.savefig("carleman.png", dpi=150)
"#;

pub const SWEEP: &str = r#"import csv
import matplotlib.pyplot as plt

with open("sweep.csv") as fh:
    rows = [r for r in csv.DictReader(fh) if r["mean_ratio"]]
try:
    x = [float(r["value"]) for r in rows]
except ValueError:
    x = list(range(1, len(rows) + 1))
y = [float(r["mean_ratio"]) for r in rows]
plt.loglog(x, y, "o-")
plt.xlabel(rows[0]["param"] if rows else "value")
plt.ylabel("mean contraction ratio")
plt.savefig("sweep.png", dpi=150)
"#;
