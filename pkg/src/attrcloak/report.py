"""Report emission: ``report.json``, one CSV per curve or matrix, SVG figures.

Input is the JSON metrics document produced by ``pipeline.metrics_json``.
Every output is a pure function of that document: JSON keys are sorted and
SVGs carry a fixed hash salt and no timestamp.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
from matplotlib.figure import Figure  # noqa: E402

from .pipeline import jsonable  # noqa: E402

REPORT_FORMAT = "attrcloak-report/1"

# Published results on real face data, kept for side-by-side reading only.
# Rows are ground truth, columns predictions, class order (positive, negative).
REFERENCE = {
    "note": "published CelebA and MUCT results with VGGFace-class models; reference only, not reproduced "
            "by the desk-scale synthetic runs",
    "celeba_three_attribute_suppression_percent": {
        "gender": {"classes": ["male", "not male"],
                   "before": [[87.70, 12.30], [19.64, 80.36]], "after": [[3.89, 96.11], [100.0, 0.0]]},
        "smiling": {"classes": ["smiling", "not smiling"],
                    "before": [[64.59, 35.41], [24.66, 75.34]], "after": [[0.02, 99.98], [99.90, 0.10]]},
        "attractive": {"classes": ["attractive", "not attractive"],
                       "before": [[89.31, 10.69], [28.41, 71.59]], "after": [[0.28, 99.72], [99.59, 0.41]]},
    },
    "muct_gender_suppression_counts": {
        "classes": ["male", "female"],
        "before": [[1741, 87], [252, 1626]],
        "after": [[0, 1828], [1878, 0]],
    },
    "celeba_suppression_success_percent_at_least": 96.0,
    "confidence_margin": 0.1,
}

_SVG_META = {"Date": None, "Creator": None}


class ReportError(OSError):
    pass


def _csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(x) for x in r])
    path.write_text(buf.getvalue())


def _cell(x):
    if isinstance(x, float):
        return repr(x)
    return "" if x is None else x


def _svg(fig: Figure, path: Path) -> None:
    with matplotlib.rc_context({"svg.hashsalt": "attrcloak", "svg.fonttype": "path"}):
        fig.savefig(path, format="svg", metadata=_SVG_META)


# -- figures ------------------------------------------------------------------

def _fig_histograms(attrs: dict) -> Figure:
    names = [n for n, a in attrs.items() if a["role"] != "free"] or list(attrs)
    fig = Figure(figsize=(2.6 * len(names), 4.4))
    axes = fig.subplots(2, len(names), squeeze=False)
    for col, name in enumerate(names):
        for row, key in enumerate(("true_score_before", "true_score_after")):
            h = attrs[name][key]
            ax = axes[row][col]
            edges = h["edges"]
            ax.bar(edges[:-1], h["counts"], width=edges[1] - edges[0], align="edge",
                   color="tab:blue" if row == 0 else "tab:red", edgecolor="white")
            ax.set_xlim(0, 1)
            ax.set_title(f"{name} ({attrs[name]['role']})" if row == 0 else "", fontsize=9)
            if col == 0:
                ax.set_ylabel("original" if row == 0 else "anonymized")
            if row == 1:
                ax.set_xlabel("true-class score")
    fig.tight_layout()
    return fig


def _fig_accuracy(attrs: dict) -> Figure:
    names = list(attrs)
    fig = Figure(figsize=(1.2 * len(names) + 2, 3.2))
    ax = fig.subplots()
    x = range(len(names))
    ax.bar([i - 0.2 for i in x], [100 * attrs[n]["accuracy_before"] for n in names], 0.4, label="original")
    ax.bar([i + 0.2 for i in x], [100 * attrs[n]["accuracy_after"] for n in names], 0.4, label="anonymized")
    ax.set_xticks(list(x))
    ax.set_xticklabels([f"{n}\n({attrs[n]['role']})" for n in names], fontsize=8)
    ax.set_ylabel("accuracy (%)")
    ax.set_ylim(0, 105)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def _fig_cmc(identity: dict) -> Figure:
    fig = Figure(figsize=(4.5, 3.4))
    ax = fig.subplots()
    for variant, m in sorted(identity.items()):
        for cond, style in (("original", "-"), ("anonymized", "--")):
            rates = m[f"cmc_{cond}"]["rates"]
            ax.plot(range(1, len(rates) + 1), rates, style, label=f"{variant} {cond}")
    ax.set_xlabel("rank")
    ax.set_ylabel("identification rate")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return fig


def _fig_roc(identity: dict) -> Figure:
    fig = Figure(figsize=(4.5, 3.4))
    ax = fig.subplots()
    for variant, m in sorted(identity.items()):
        for cond, style in (("original", "-"), ("anonymized", "--")):
            roc = m[f"roc_{cond}"]
            if roc is None:
                continue
            ax.plot(roc["far"], roc["tar"], style, label=f"{variant} {cond} (AUC {roc['auc']:.3f})")
    ax.plot([0, 1], [0, 1], ":", color="grey", linewidth=0.8)
    ax.set_xlabel("false accept rate")
    ax.set_ylabel("true accept rate")
    ax.legend(fontsize=7)
    fig.tight_layout()
    return fig


def _fig_psnr(samples: list[dict]) -> Figure:
    vals = [s["psnr"] for s in samples if s["success"] and isinstance(s["psnr"], float)]
    fig = Figure(figsize=(4.5, 3.2))
    ax = fig.subplots()
    if vals:
        ax.hist(vals, bins=20, color="tab:green", edgecolor="white")
    ax.set_xlabel("PSNR (dB), successful samples")
    ax.set_ylabel("count")
    fig.tight_layout()
    return fig


# -- report -------------------------------------------------------------------

def _identity_summary(m: dict) -> dict:
    keys = ("variant", "rank1_original", "rank1_anonymized", "rank1_drop", "auc_original",
            "auc_anonymized", "auc_drop", "genuine_pairs", "impostor_pairs", "self_distance_mean",
            "self_distance_max")
    out = {k: m[k] for k in keys}
    out["cmc_original"] = m["cmc_original"]["rates"]
    out["cmc_anonymized"] = m["cmc_anonymized"]["rates"]
    return out


def build_report(metrics: dict) -> dict:
    attrs = {}
    for name, a in metrics["attributes"].items():
        attrs[name] = {
            "role": a["role"],
            "accuracy_before": a["accuracy_before"], "accuracy_after": a["accuracy_after"],
            "confusion_before": a["confusion_before"], "confusion_after": a["confusion_after"],
            "true_score_histogram_before": a["true_score_before"]["counts"],
            "true_score_histogram_after": a["true_score_after"]["counts"],
            "histogram_edges": a["true_score_before"]["edges"],
            "true_score_below_half_after": a["true_score_below_half_after"],
        }
        for k in ("margin_success_min", "margin_success_mean"):
            if k in a:
                attrs[name][k] = a[k]
    return {
        "format": REPORT_FORMAT,
        "experiment": metrics.get("experiment"),
        "attack": metrics["summary"],
        "spec": metrics["spec"],
        "classifier_test_accuracy": metrics["classifier_test_accuracy"],
        "attributes": attrs,
        "quality": {"success": metrics["quality_success"], "all": metrics["quality_all"]},
        "identity": {v: _identity_summary(m) for v, m in sorted(metrics["identity"].items())},
        "reference": REFERENCE,
    }


def write_report(metrics: dict, directory, figures: bool = True) -> Path:
    """Write report.json, CSVs and (optionally) SVG figures; returns the report path."""
    root = Path(directory)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ReportError(f"report directory {root} is not writable: {exc}") from None

    files = []

    def emit(name: str, header, rows):
        _csv(root / name, header, rows)
        files.append(name)

    attrs = metrics["attributes"]
    for name, a in attrs.items():
        for phase in ("before", "after"):
            cm = a[f"confusion_{phase}"]
            n = len(cm["counts"])
            emit(f"confusion_{name}_{phase}.csv", ["true"] + [f"pred_{j}" for j in range(n)],
                 [[i] + row for i, row in enumerate(cm["counts"])])
        hb, ha = a["true_score_before"], a["true_score_after"]
        edges = hb["edges"]
        emit(f"scores_{name}.csv", ["bin_low", "bin_high", "before", "after"],
             [[edges[i], edges[i + 1], hb["counts"][i], ha["counts"][i]] for i in range(len(hb["counts"]))])
    emit("samples.csv", ["id", "success", "distortion", "psnr"],
         [[s["id"], int(s["success"]), s["distortion"], s["psnr"]] for s in metrics["samples"]])
    for variant, m in sorted(metrics["identity"].items()):
        for cond in ("original", "anonymized"):
            rates = m[f"cmc_{cond}"]["rates"]
            emit(f"cmc_{variant}_{cond}.csv", ["rank", "rate"], [[r + 1, v] for r, v in enumerate(rates)])
            roc = m[f"roc_{cond}"]
            if roc is None:
                continue
            emit(f"roc_{variant}_{cond}.csv", ["threshold", "far", "tar"],
                 [["-inf" if t is None else t, f, t_] for t, f, t_ in zip(roc["thresholds"], roc["far"], roc["tar"])])

    if figures:
        figs = {"scores.svg": _fig_histograms(attrs), "accuracy.svg": _fig_accuracy(attrs),
                "psnr.svg": _fig_psnr(metrics["samples"])}
        if metrics["identity"]:
            figs["cmc.svg"] = _fig_cmc(metrics["identity"])
            if any(m["roc_original"] is not None for m in metrics["identity"].values()):
                figs["roc.svg"] = _fig_roc(metrics["identity"])
        for name, fig in figs.items():
            _svg(fig, root / name)
            files.append(name)

    doc = build_report(metrics)
    doc["files"] = sorted(files)
    path = root / "report.json"
    path.write_text(json.dumps(jsonable(doc), indent=1, sort_keys=True) + "\n")
    return path
