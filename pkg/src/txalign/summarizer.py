"""Behavioural profiles, LLM prompts and the `agg` baseline features."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .data import SECONDS_PER_DAY, EventSequence

SYSTEM_MESSAGE = (
    "You are an expert in financial transaction analysis. Your task is to generate clear, "
    "structured, and concise descriptions of user financial behavior based on given transaction "
    "data. Use data-driven insights and avoid speculation."
)

GUIDELINES = (
    "Do not include phrases like “Here’s a financial behavior description for User X”",
    "Start directly with behavioral insights",
    "Interpret numbers into patterns (e.g., burst spending, routine payments)",
    "Highlight spending habits, risk factors, financial consistency",
    "Avoid unsupported assumptions; maintain clarity and conciseness",
)

INSTRUCTIONS = (
    "Analyze behavioral patterns",
    "Identify transaction regularity and category reliance",
    "Assess potential risk factors and financial planning traits",
    "Write in a structured and engaging way while staying factual",
)

USER_MARKER = "User: "


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class BehaviorProfile:
    n_transactions: int
    active_period_days: int
    avg_tx_per_day: float
    avg_interval_days: float
    top_mccs: tuple[str, ...]
    share_top1: float
    avg_amount_top: tuple[float, ...]
    share_active_days: float
    total_income: float
    total_expenses: float
    avg_outgoing: float
    avg_incoming: float

    def to_dict(self) -> dict:
        d = asdict(self)
        d["top_mccs"] = list(self.top_mccs)
        d["avg_amount_top"] = list(self.avg_amount_top)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BehaviorProfile":
        return cls(**(d | {"top_mccs": tuple(d["top_mccs"]), "avg_amount_top": tuple(d["avg_amount_top"])}))


def load_mcc_names(path: str | Path) -> dict[int, str]:
    """Read an ``index,name`` CSV."""
    names = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            names[int(row["index"])] = row["name"]
    return names


def write_mcc_names(names: dict[int, str], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "name"])
        for k in sorted(names):
            writer.writerow([k, names[k]])


def _sorted_columns(seq: EventSequence):
    order = np.argsort(seq.timestamps, kind="stable")
    return seq.timestamps[order], seq.amounts[order], seq.mcc[order]


def compute_profile(seq: EventSequence, mcc_names: dict[int, str]) -> BehaviorProfile:
    if len(seq) == 0:
        raise ProfileError(f"client {seq.client_id}: empty sequence")
    ts, amounts, mcc = _sorted_columns(seq)
    unknown = sorted(set(np.unique(mcc).tolist()) - set(mcc_names))
    if unknown:
        raise ProfileError(f"client {seq.client_id}: no name for MCC index {unknown[0]}")

    n = len(ts)
    active = math.floor((ts[-1] - ts[0]) / SECONDS_PER_DAY + 0.5)
    codes, counts = np.unique(mcc, return_counts=True)
    # np.unique returns ascending codes, so a stable sort on -count breaks ties by code
    ranked = codes[np.argsort(-counts, kind="stable")][:3]
    magnitudes = np.abs(amounts)
    income = amounts[amounts > 0]
    expenses = -amounts[amounts < 0]
    distinct_days = len(np.unique(ts // SECONDS_PER_DAY))

    return BehaviorProfile(
        n_transactions=n,
        active_period_days=active,
        avg_tx_per_day=n / max(active, 1),
        avg_interval_days=active / (n - 1) if n > 1 else 0.0,
        top_mccs=tuple(mcc_names[int(c)] for c in ranked),
        share_top1=float(np.count_nonzero(mcc == ranked[0])) / n,
        avg_amount_top=tuple(float(magnitudes[mcc == c].mean()) for c in ranked),
        share_active_days=min(1.0, distinct_days / (active + 1)),
        total_income=math.fsum(income),
        total_expenses=math.fsum(expenses),
        avg_outgoing=float(expenses.mean()) if len(expenses) else 0.0,
        avg_incoming=float(income.mean()) if len(income) else 0.0,
    )


def _money(x: float) -> str:
    return f"{x:,.2f}"


def _bullets(items) -> str:
    return "\n".join(f"• {item}" for item in items)


def _system_block() -> str:
    return f"System: {SYSTEM_MESSAGE}\n\nGuidelines:\n{_bullets(GUIDELINES)}"


def _instructions_block() -> str:
    return f"Instructions:\n{_bullets(INSTRUCTIONS)}"


def profile_lines(profile: BehaviorProfile, currency: str = "RUB") -> list[str]:
    top_amounts = list(profile.avg_amount_top) + [None] * (3 - len(profile.avg_amount_top))
    lines = [
        f"- Number of transactions: {profile.n_transactions}",
        f"- Active transaction period: {profile.active_period_days} days",
        f"- Avg transactions per day: {profile.avg_tx_per_day:.2f}",
        f"- Avg transaction interval: {profile.avg_interval_days:.2f} days",
        f"- Top MCCs: {', '.join(profile.top_mccs)}",
        f"- Share of transactions in Top 1 MCC: {profile.share_top1:.2f}",
    ]
    for k, amount in enumerate(top_amounts, start=1):
        # per-category averages carry no thousands separator
        value = "n/a" if amount is None else f"{amount:.2f} {currency}"
        lines.append(f"- Avg amount for Top {k} MCC: {value}")
    lines += [
        f"- Share of days with transactions: {profile.share_active_days:.2f}",
        f"- Total income: {_money(profile.total_income)} {currency}",
        f"- Total expenses: {_money(profile.total_expenses)} {currency}",
        f"- Avg outgoing amount: {_money(profile.avg_outgoing)} {currency}",
        f"- Avg incoming amount: {_money(profile.avg_incoming)} {currency}",
    ]
    return lines


def render_prompt(profile: BehaviorProfile, currency: str = "RUB") -> str:
    body = "\n".join(profile_lines(profile, currency))
    return (
        f"{_system_block()}\n\n"
        f"{USER_MARKER}Below is a summary of a user’s transaction history:\n{body}\n\n"
        f"{_instructions_block()}\n"
    )


def render_raw_prompt(
    seq: EventSequence,
    max_events: int,
    mcc_names: dict[int, str] | None = None,
    tx_type_names: dict[int, str] | None = None,
) -> str:
    """Prompt for the raw-serialization ablation: the latest events, one per line."""
    if len(seq) == 0:
        raise ProfileError(f"client {seq.client_id}: empty sequence")
    mcc_names = mcc_names or {}
    tx_type_names = tx_type_names or {}
    ts, amounts, mcc = _sorted_columns(seq)
    tx = seq.tx_type[np.argsort(seq.timestamps, kind="stable")]
    keep = slice(max(0, len(ts) - max_events), None)
    lines = []
    for t, a, m, k in zip(ts[keep], amounts[keep], mcc[keep], tx[keep]):
        when = datetime.fromtimestamp(int(t), tz=timezone.utc).strftime("%Y-%m-%d %H:%M:%S")
        lines.append(
            f"{when} | {mcc_names.get(int(m), f'mcc_{int(m)}')} | "
            f"{tx_type_names.get(int(k), f'type_{int(k)}')} | {a:.2f}"
        )
    return (
        f"{_system_block()}\n\n"
        f"{USER_MARKER}Below are the user’s most recent transactions "
        f"(timestamp | merchant category | transaction type | amount):\n"
        + "\n".join(lines)
        + f"\n\n{_instructions_block()}\n"
    )


def split_prompt(prompt: str) -> tuple[str, str]:
    """Split a rendered prompt into (system, user) chat messages."""
    head, sep, tail = prompt.partition("\n\n" + USER_MARKER)
    if not sep:
        return "", prompt
    return head.removeprefix("System: "), tail


@dataclass(frozen=True)
class AggFeatures:
    numeric: dict[str, tuple[float, float, float, float]]  # mean, std, min, max
    histograms: dict[str, np.ndarray]

    @property
    def vector(self) -> np.ndarray:
        parts = [np.array(v) for v in self.numeric.values()] + list(self.histograms.values())
        return np.concatenate(parts)


def agg_features(seq: EventSequence, vocab_sizes: dict[str, int]) -> AggFeatures:
    if len(seq) == 0:
        raise ProfileError(f"client {seq.client_id}: empty sequence")
    ts = np.sort(seq.timestamps)
    gaps = np.diff(ts) / SECONDS_PER_DAY if len(ts) > 1 else np.zeros(1)
    numeric = {}
    for name, x in (("amount", seq.amounts), ("interval_days", gaps)):
        numeric[name] = (float(x.mean()), float(x.std()), float(x.min()), float(x.max()))
    histograms = {}
    for name in ("mcc", "tx_type"):
        col = getattr(seq, name)
        histograms[name] = np.bincount(col, minlength=vocab_sizes[name]) / len(col)
    return AggFeatures(numeric=numeric, histograms=histograms)
