"""Shaped edge rewards, terminal reward, and the sliding ask counter.

All functions are plain arithmetic over their inputs, so they stay exact when
called with ``fractions.Fraction`` values.
"""

from __future__ import annotations

from typing import Sequence


def effectiveness_reward(z: int, n_next: int):
    if z == 0:
        return 0
    return 1 if n_next == 0 else -1


def update_counter(window: Sequence[int], H: int, z: int) -> tuple[int, tuple[int, ...]]:
    """Asks among the last ``H`` edges including the current one.

    Returns the count and the advanced window (at most ``H - 1`` bits, FIFO).
    Extra leading bits in ``window`` are ignored.
    """
    if H < 1:
        raise ValueError("H must be >= 1")
    prior = tuple(window)[-(H - 1):] if H > 1 else ()
    c = sum(prior) + z
    advanced = (prior + (z,))[-(H - 1):] if H > 1 else ()
    return c, advanced


def parsimony_reward(c: int, lambda_sw):
    return -lambda_sw * max(c - 1, 0)


def format_reward(flag: int, alpha_fmt):
    return alpha_fmt * (1 if flag == 1 else 0)


def edge_reward(r_eff, r_par, r_fmt, alpha_eff):
    return alpha_eff * r_eff + r_par + r_fmt


def terminal_reward(s: int, alpha_ans):
    return alpha_ans * s
