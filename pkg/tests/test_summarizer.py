import numpy as np
import pytest

from txalign.data import EventRecord, EventSequence, generate_synthetic, synthetic_mcc_names
from txalign.summarizer import (
    BehaviorProfile,
    ProfileError,
    agg_features,
    compute_profile,
    load_mcc_names,
    render_prompt,
    render_raw_prompt,
    split_prompt,
    write_mcc_names,
)

from conftest import DAY, make_seq

NAMES = {i: f"m{i}" for i in range(10)}

REFERENCE_PROFILE = BehaviorProfile(
    n_transactions=226,
    active_period_days=444,
    avg_tx_per_day=226 / 444,
    avg_interval_days=444 / 225,
    top_mccs=("Supermarkets", "cash withdrawals", "telecommunications"),
    share_top1=0.04,
    avg_amount_top=(2770.47, 45969.41, 8139.52),
    share_active_days=0.36,
    total_income=2706553.10,
    total_expenses=3956007.97,
    avg_outgoing=17981.85,
    avg_incoming=451092.18,
)

REFERENCE_PROMPT = """System: You are an expert in financial transaction analysis. Your task is to generate clear, structured, and concise descriptions of user financial behavior based on given transaction data. Use data-driven insights and avoid speculation.

Guidelines:
• Do not include phrases like “Here’s a financial behavior description for User X”
• Start directly with behavioral insights
• Interpret numbers into patterns (e.g., burst spending, routine payments)
• Highlight spending habits, risk factors, financial consistency
• Avoid unsupported assumptions; maintain clarity and conciseness

User: Below is a summary of a user’s transaction history:
- Number of transactions: 226
- Active transaction period: 444 days
- Avg transactions per day: 0.51
- Avg transaction interval: 1.97 days
- Top MCCs: Supermarkets, cash withdrawals, telecommunications
- Share of transactions in Top 1 MCC: 0.04
- Avg amount for Top 1 MCC: 2770.47 RUB
- Avg amount for Top 2 MCC: 45969.41 RUB
- Avg amount for Top 3 MCC: 8139.52 RUB
- Share of days with transactions: 0.36
- Total income: 2,706,553.10 RUB
- Total expenses: 3,956,007.97 RUB
- Avg outgoing amount: 17,981.85 RUB
- Avg incoming amount: 451,092.18 RUB

Instructions:
• Analyze behavioral patterns
• Identify transaction regularity and category reliance
• Assess potential risk factors and financial planning traits
• Write in a structured and engaging way while staying factual
"""


def seq_of(pairs, cid="a"):
    """pairs of (timestamp, amount, mcc)."""
    return EventSequence.from_records(cid, [EventRecord(t, a, m, 0) for t, a, m in pairs])


def test_reference_profile_ratios():
    # 226 events evenly over 444 days
    ts = np.round(np.linspace(0, 444 * DAY, 226)).astype(int)
    p = compute_profile(seq_of([(int(t), -10.0, 0) for t in ts]), NAMES)
    assert p.active_period_days == 444
    assert p.avg_tx_per_day == pytest.approx(0.51, abs=0.005)
    assert p.avg_interval_days == pytest.approx(1.97, abs=0.01)


def test_single_event():
    p = compute_profile(seq_of([(1000, -5.0, 3)]), NAMES)
    assert (p.active_period_days, p.avg_interval_days, p.share_active_days) == (0, 0.0, 1.0)
    assert p.avg_tx_per_day == 1.0
    assert p.top_mccs == ("m3",)


def test_same_day_totals():
    p = compute_profile(seq_of([(10, 100.0, 0), (20, -50.0, 1)]), NAMES)
    assert (p.total_income, p.total_expenses, p.share_active_days) == (100.0, 50.0, 1.0)
    assert (p.avg_incoming, p.avg_outgoing) == (100.0, 50.0)


def test_top_mcc_ties_break_by_code():
    p = compute_profile(seq_of([(1, -1.0, 7), (2, -3.0, 2), (3, -1.0, 7), (4, -5.0, 2), (5, -1.0, 4)]), NAMES)
    assert p.top_mccs == ("m2", "m7", "m4")
    assert p.share_top1 == pytest.approx(0.4)
    assert p.avg_amount_top == (4.0, 1.0, 1.0)


def test_profile_errors():
    empty = EventSequence("e", np.array([], int), np.array([]), np.array([], int), np.array([], int))
    with pytest.raises(ProfileError):
        compute_profile(empty, NAMES)
    with pytest.raises(ProfileError, match="12"):
        compute_profile(seq_of([(1, 1.0, 12)]), NAMES)


def test_profile_ignores_input_order():
    s = make_seq(n=40, seed=3)
    shuffled = EventSequence.from_records("c0", list(reversed(s.events)))
    assert compute_profile(s, NAMES) == compute_profile(shuffled, NAMES)


def test_synthetic_profile_invariants():
    ds = generate_synthetic(200, 2)
    names = synthetic_mcc_names(40)
    for s in ds.sequences:
        p = compute_profile(s, names)
        # whole-number amounts make the signed balance exact
        assert p.total_income - p.total_expenses == s.amounts.sum()
        assert 0 <= p.share_top1 <= 1 and 0 < p.share_active_days <= 1
        counts = np.bincount(s.mcc)
        assert p.share_top1 == counts.max() / len(s)
        assert p.avg_tx_per_day == len(s) / max(p.active_period_days, 1)


def test_reference_prompt_verbatim():
    assert render_prompt(REFERENCE_PROFILE) == REFERENCE_PROMPT
    assert render_prompt(REFERENCE_PROFILE) == render_prompt(REFERENCE_PROFILE)


def test_prompt_bullets_in_order():
    prompt = render_prompt(compute_profile(make_seq(n=30), {i: f"m{i}" for i in range(6)}))
    bullets = [line.split(":")[0] for line in prompt.splitlines() if line.startswith("- ")]
    expected = [line.split(":")[0] for line in REFERENCE_PROMPT.splitlines() if line.startswith("- ")]
    assert bullets == expected and len(bullets) == 14


def test_zero_income_formatting():
    p = compute_profile(seq_of([(1, -5.0, 0), (2, -6.0, 0)]), NAMES)
    prompt = render_prompt(p)
    assert "- Total income: 0.00 RUB" in prompt
    assert "- Avg amount for Top 2 MCC: n/a" in prompt


def test_split_prompt():
    system, user = split_prompt(REFERENCE_PROMPT)
    assert system.startswith("You are an expert")
    assert user.startswith("Below is a summary")
    assert "Instructions:" in user


def _raw_lines(prompt):
    return [line for line in prompt.splitlines() if line.count(" | ") == 3 and line[:4].isdigit()]


def test_raw_prompt_no_truncation():
    s = seq_of([(0, -1.5, 0), (DAY, 2.0, 1), (2 * DAY + 61, -3.0, 2)])
    lines = _raw_lines(render_raw_prompt(s, 10, NAMES, {0: "card"}))
    assert lines == [
        "1970-01-01 00:00:00 | m0 | card | -1.50",
        "1970-01-02 00:00:00 | m1 | card | 2.00",
        "1970-01-03 00:01:01 | m2 | card | -3.00",
    ]


def test_raw_prompt_keeps_latest():
    s = seq_of([(i * 60, float(i), 0) for i in range(500)])
    out = render_raw_prompt(s, 100)
    lines = _raw_lines(out)
    assert len(lines) == 100
    assert lines[0].endswith("| 400.00") and lines[-1].endswith("| 499.00")
    assert out == render_raw_prompt(s, 100)


def test_agg_constant_amounts():
    f = agg_features(seq_of([(i, 5.0, 0) for i in range(4)]), {"mcc": 3, "tx_type": 1})
    mean, std, lo, hi = f.numeric["amount"]
    assert (mean, std, lo, hi) == (5.0, 0.0, 5.0, 5.0)


def test_agg_one_hot():
    f = agg_features(seq_of([(0, 1.0, 2)]), {"mcc": 4, "tx_type": 2})
    assert f.histograms["mcc"].tolist() == [0, 0, 1, 0]
    assert f.histograms["tx_type"].tolist() == [1, 0]


def test_agg_population_std():
    f = agg_features(seq_of([(0, -10.0, 0), (DAY, 10.0, 0)]), {"mcc": 1, "tx_type": 1})
    assert f.numeric["amount"] == (0.0, 10.0, -10.0, 10.0)
    assert f.numeric["interval_days"] == (1.0, 0.0, 1.0, 1.0)


def test_agg_dimension_is_constant():
    ds = generate_synthetic(20, 0)
    dims = {agg_features(s, ds.vocab_sizes).vector.shape for s in ds.sequences}
    assert dims == {(8 + 40 + 4,)}
    for s in ds.sequences:
        for h in agg_features(s, ds.vocab_sizes).histograms.values():
            assert h.sum() == pytest.approx(1.0)


def test_mcc_names_round_trip(tmp_path):
    names = {0: "Supermarkets", 3: "cash, withdrawals"}
    write_mcc_names(names, tmp_path / "n.csv")
    assert load_mcc_names(tmp_path / "n.csv") == names
