"""Report figures written next to the CSV outputs."""
import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}

# no timestamps or version strings, so identical inputs give identical bytes
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def _mean_band(series):
    length = min(len(s) for s in series)
    arr = np.array([s[:length] for s in series])
    return np.arange(1, length + 1), arr.mean(axis=0), arr.std(axis=0)


def learning_curves(summary, path, title=None):
    """Train loss and valid/test metric per epoch, mean +/- std over seeds."""
    results = [r.result for r in summary.runs]
    with plt.rc_context(STYLE):
        fig, (ax_loss, ax_metric) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        x, m, s = _mean_band([r.train_loss for r in results])
        ax_loss.plot(x, m, color="k", lw=1)
        ax_loss.fill_between(x, m - s, m + s, color="k", alpha=0.15, lw=0)
        ax_loss.set_xlabel("epoch")
        ax_loss.set_ylabel("train loss")
        for split, color in (("valid", "tab:blue"), ("test", "tab:orange")):
            x, m, s = _mean_band([getattr(r, split) for r in results])
            ax_metric.plot(x, m, color=color, lw=1, label=split)
            ax_metric.fill_between(x, m - s, m + s, color=color, alpha=0.2, lw=0)
        ax_metric.set_xlabel("epoch")
        ax_metric.set_ylabel(results[0].metric)
        ax_metric.legend(frameon=False)
        fig.suptitle(title or f"{summary.model} {summary.tricks}")
        _save(fig, path)


def ablation_chart(rows, path, metric="accuracy"):
    """Horizontal bars of test mean with std error bars, one per ablation row."""
    rows = [r for r in rows if np.isfinite(r["test_mean"])]
    labels = [f"{r['model']} {r['tricks']}" if r["tricks"] != "-" else r["model"] for r in rows]
    means = np.array([r["test_mean"] for r in rows]) * 100
    stds = np.array([r["test_std"] for r in rows]) * 100
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 0.45 * max(len(rows), 2) + 0.8))
        y = np.arange(len(rows))[::-1]
        ax.barh(y, means, xerr=stds, color="0.7", edgecolor="k", lw=0.6, capsize=3)
        ax.set_yticks(y)
        ax.set_yticklabels(labels)
        lo = max(0.0, float((means - stds).min()) - 5) if rows else 0.0
        ax.set_xlim(lo, 100)
        ax.set_xlabel(f"test {metric} (%)")
        _save(fig, path)


def smoothing_curve(plain_var, res_var, path):
    """Representation variance against depth for plain GCN and GCN_res."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 2.8))
        ax.semilogy(np.arange(len(plain_var)), plain_var, "o-", ms=3, label="GCN")
        ax.semilogy(np.arange(len(res_var)), res_var, "s-", ms=3, label="GCN_res")
        ax.set_xlabel("depth k")
        ax.set_ylabel("variance across nodes")
        ax.legend(frameon=False)
        _save(fig, path)
