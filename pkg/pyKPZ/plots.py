"""Static figures drawn from emitted result rows."""
import logging
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy  # noqa: E402


def _column(rows: List[dict], key: str) -> numpy.ndarray:
    return numpy.array([float(r[key]) for r in rows])


def covariance_plot(rows: List[dict], path: str, *, slope: float = None, amplitude: float = None):
    """Log-log covariance against separation, one series per estimator."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in sorted({r["estimator"] for r in rows}):
        series = [r for r in rows if r["estimator"] == name and float(r["x"]) > 0 and float(r["value"]) > 0]
        if not series:
            continue
        ax.errorbar(_column(series, "x"), _column(series, "value"), yerr=_column(series, "se"), fmt="o", capsize=3, label=name)

    if slope is not None and amplitude is not None:
        xs = numpy.array(sorted({float(r["x"]) for r in rows if float(r["x"]) > 0}))
        if len(xs):
            ax.plot(xs, amplitude * xs**slope, "k--", label=f"slope {slope:.3f}")

    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("|x|")
    ax.set_ylabel("Cov(Z(0), Z(x))")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    logging.info(f"wrote {path}")


def tail_plot(rows: List[dict], path: str):
    """Empirical lower tail with Wilson bars and the fitted envelope."""
    tails = [r for r in rows if r.get("kind", "tail") == "tail"]
    fig, ax = plt.subplots(figsize=(6, 4))
    for inner in sorted({int(float(r["inner"])) for r in tails}):
        series = [r for r in tails if int(float(r["inner"])) == inner]
        theta = _column(series, "theta")
        p = _column(series, "p")
        shown = p > 0
        err = numpy.vstack([p - _column(series, "lower"), _column(series, "upper") - p])
        ax.errorbar(theta[shown], p[shown], yerr=err[:, shown], fmt="o", capsize=3, label=f"inner {inner}")

        c_hat = float(series[0]["c_hat"])
        if numpy.isfinite(c_hat) and shown.any():
            anchor = numpy.argmax(shown)
            envelope = p[anchor] * numpy.exp(-(theta**2 - theta[anchor] ** 2) / c_hat)
            ax.plot(theta, envelope, "--", label=f"envelope c={c_hat:.3g}")

    ax.set_yscale("log")
    ax.set_xlabel("theta")
    ax.set_ylabel("P[log Z <= -theta]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    logging.info(f"wrote {path}")


def plateau_plot(rows: List[dict], path: str):
    fig, ax = plt.subplots(figsize=(6, 4))
    horizons = _column(rows, "T")
    ax.errorbar(horizons, _column(rows, "second_moment"), yerr=_column(rows, "se"), fmt="o-", capsize=3, label="E[Z_T^2]")
    steps = [r for r in rows if numpy.isfinite(float(r["increment"]))]
    if steps:
        ax.errorbar(
            _column(steps, "T"), _column(steps, "increment"), yerr=_column(steps, "increment_se"),
            fmt="s-", capsize=3, label="E[(Z_T - Z_prev)^2]",
        )
    ax.set_xscale("log")
    ax.set_xlabel("T")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    logging.info(f"wrote {path}")


PLOTS = {"covariance": covariance_plot, "tails": tail_plot, "plateau": plateau_plot}


def render(kind: str, rows: List[dict], path: str, **kwargs):
    if kind not in PLOTS:
        raise ValueError(f"unknown plot {kind!r}, expected one of {sorted(PLOTS)}")
    PLOTS[kind](rows, path, **kwargs)
