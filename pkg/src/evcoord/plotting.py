"""Figures rendered next to the CSV reports (PNG, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import grid  # noqa: E402

RC = {
    "figure.figsize": (6.4, 3.6),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "lines.linewidth": 1.4,
    "savefig.dpi": 120,
}

# keeps repeated renders byte-identical
_META = {"Software": None}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def _hours(T):
    return np.arange(T)


def envelopes(regions: dict, path, title="Aggregate EV flexibility"):
    with plt.rc_context(RC):
        n = len(regions)
        fig, axes = plt.subplots(1, n, figsize=(3.0 * n, 3.0), sharey=True, squeeze=False)
        for ax, (sid, reg) in zip(axes[0], regions.items()):
            h = _hours(len(reg.upper_kw))
            ax.fill_between(h, reg.lower_kw, reg.upper_kw, step="post", alpha=0.35, label="region")
            ax.step(h, reg.upper_kw, where="post", label="upper")
            ax.step(h, reg.lower_kw, where="post", label="lower")
            ax.set_title(sid)
            ax.set_xlabel("hour")
        axes[0][0].set_ylabel("kW")
        axes[0][0].legend(loc="upper left")
        fig.suptitle(title)
        return _save(fig, path)


def residuals(trace, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        k = [st.k for st in trace]
        ax.semilogy(k, [max(st.residual, 1e-16) for st in trace], label="price change r")
        ax.semilogy(k, [max(st.schedule_residual, 1e-16) for st in trace], "--", label="schedule change s")
        ax.set_xlabel("iteration")
        ax.legend()
        return _save(fig, path)


def prices(price_map: dict, path, reference=None):
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        for sid, lam in price_map.items():
            ax.plot(_hours(len(lam)), lam, marker=".", label=sid)
        if reference is not None:
            ax.step(_hours(len(reference)), reference, where="mid", color="k", alpha=0.5, label="utility buy")
        ax.set_xlabel("hour")
        ax.set_ylabel("$/kWh")
        ax.legend(ncol=2)
        return _save(fig, path)


def station_voltages(state: grid.NetworkState, net: grid.NetworkModel, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        for sid, j in net.station_bus_index().items():
            ax.plot(_hours(state.horizon), np.sqrt(state.v[:, j]), label=f"{sid} (bus {net.station_map[sid]})")
        ax.axhline(np.sqrt(net.v_min[1:].min()), color="k", ls=":")
        ax.set_xlabel("hour")
        ax.set_ylabel("|V| (p.u.)")
        ax.legend()
        return _save(fig, path)


def line_losses(state: grid.NetworkState, net: grid.NetworkModel, path, other=None, labels=("proposed", "baseline")):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(8.0, 3.2))
        e = grid.line_losses_kw(state, net).sum(axis=0) * net.dt_hours
        idx = np.arange(net.n_line)
        width = 0.4 if other is not None else 0.8
        ax.bar(idx - (width / 2 if other is not None else 0), e, width, label=labels[0])
        if other is not None:
            ax.bar(idx + width / 2, grid.line_losses_kw(other, net).sum(axis=0) * net.dt_hours, width, label=labels[1])
            ax.legend()
        names = [f"{net.bus_ids[a]}-{net.bus_ids[b]}" for a, b in zip(net.line_from, net.line_to)]
        ax.set_xticks(idx, names, rotation=90, fontsize=6)
        ax.set_ylabel("loss (kWh/day)")
        return _save(fig, path)


def station_power(decisions: dict, stations, path):
    pv = {s.station_id: s.pv_profile_kw for s in stations}
    with plt.rc_context(RC):
        n = len(decisions)
        fig, axes = plt.subplots(n, 1, figsize=(6.4, 2.2 * n), sharex=True, squeeze=False)
        for ax, (sid, d) in zip(axes[:, 0], decisions.items()):
            h = _hours(len(d.p_d_kw))
            ax.bar(h, d.p_g_kw, label="grid", alpha=0.7)
            ax.bar(h, pv[sid], bottom=np.maximum(d.p_g_kw, 0), label="PV", alpha=0.7)
            ax.plot(h, d.p_b_dis_kw - d.p_b_chg_kw, color="C3", label="battery")
            ax.plot(h, d.p_d_kw, color="k", label="EV demand")
            ax.set_ylabel(f"{sid} kW")
        axes[0, 0].legend(ncol=4, loc="upper left")
        axes[-1, 0].set_xlabel("hour")
        return _save(fig, path)


def cost_comparison(baseline, proposed, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        names = list(baseline.stations) + ["DSO", "total"]
        b = [baseline.stations[s].total for s in baseline.stations] + [baseline.C_dso, baseline.total]
        p = [proposed.stations[s].total for s in proposed.stations] + [proposed.C_dso, proposed.total]
        idx = np.arange(len(names))
        ax.bar(idx - 0.2, b, 0.4, label="baseline")
        ax.bar(idx + 0.2, p, 0.4, label="proposed")
        ax.set_xticks(idx, names)
        ax.set_ylabel("$")
        ax.legend()
        return _save(fig, path)
