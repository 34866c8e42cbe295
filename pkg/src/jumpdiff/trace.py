"""Time-ordered records of simulated trajectories and their CSV form."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field


@dataclass
class SampleTrace:
    """Snapshots ``(t, state)`` plus jump events ``(t, kind, index)``.

    ``kind`` is ``"insert"`` or ``"delete"``; ``index`` is the 1-based
    component position the jump acted on.
    """

    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def record(self, t, state):
        self.times.append(float(t))
        self.states.append(state)

    def jump(self, t, kind, index):
        self.events.append((float(t), kind, int(index)))

    @property
    def n_path(self):
        return [s.n for s in self.states]

    def rows(self, chain=0):
        """Merge snapshots and events into time-ordered CSV rows."""
        out = []
        for t, s in zip(self.times, self.states):
            out.append((t, 0, [chain, repr(t), s.n, "state", ""] + [repr(float(v)) for v in s.x]))
        for t, kind, index in self.events:
            out.append((t, 1, [chain, repr(t), "", kind, index]))
        # forward traces run with increasing t, backward ones with decreasing t
        reverse = len(self.times) > 1 and self.times[-1] < self.times[0]
        out.sort(key=lambda r: (-r[0] if reverse else r[0], r[1]))
        return [r[2] for r in out]


TRACE_HEADER = ["chain", "t", "n", "event", "index", "x"]


def write_traces(path, traces):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for chain, tr in enumerate(traces):
            w.writerows(tr.rows(chain))


def read_trace_rows(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != TRACE_HEADER:
            raise ValueError(f"unexpected trace header {header}")
        return [row for row in r]
