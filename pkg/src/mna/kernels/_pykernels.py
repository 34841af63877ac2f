"""Pure-Python kernels; reference semantics for the compiled versions."""

import numpy as np


def meter_run(times, need, rate, cap, credits, last):
    """Token-bucket decisions for packets arriving at ``times`` (slots).

    Credits are tokens scaled by slots-per-tick so refills stay integral:
    ``rate`` credits accrue per slot, ``cap`` bounds the bucket and packet
    ``i`` needs ``need[i]`` credits.
    """
    n = len(times)
    mask = np.zeros(n, dtype=np.uint8)
    for i in range(n):
        t = int(times[i])
        if t > last:
            credits = min(cap, credits + rate * (t - last))
            last = t
        if credits >= need[i]:
            credits -= int(need[i])
            mask[i] = 1
    return mask, credits, last


def amm_run(colors, n_a, n_b, last):
    """Count packets per color; report the previous color's counter on change.

    ``last`` is -1 before the first packet.  Returns the new counters and the
    positions and counter values of the exports.
    """
    pos = []
    counter = []
    for i in range(len(colors)):
        c = int(colors[i])
        if last != -1 and c != last:
            pos.append(i)
            counter.append(n_a if last == 0 else n_b)
        if c == 0:
            n_a += 1
        else:
            n_b += 1
        last = c
    return (n_a, n_b, last, np.asarray(pos, dtype=np.int64),
            np.asarray(counter, dtype=np.int64))


def admit_run(sizes, budget):
    """Admit packets in order while the link budget lasts."""
    n = len(sizes)
    mask = np.zeros(n, dtype=np.uint8)
    for i in range(n):
        s = int(sizes[i])
        if s <= budget:
            budget -= s
            mask[i] = 1
    return mask, budget
