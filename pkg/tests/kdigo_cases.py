"""Hand-constructed creatinine series with rule-forced expectations.

Times are hours after admission. ``stages`` lists the expected stage of
every assessed point, including the synthetic point inserted at the start
of each KRT interval. Each expectation was traced by hand from the rules:
48 h nadir over [t-48h, t) (reference joins when anchored in the window or
the window is empty), ratio to min(reference, values in [t-7d, t)).
"""
from dataclasses import dataclass, field


@dataclass
class Case:
    name: str
    ref: float
    points: list
    stages: list
    group: str
    severity: str
    ref_anchor_h: float = 0
    krt: list = field(default_factory=list)
    n_episodes: int | None = None
    note: str = ""


CASES = [
    # ratio boundaries, reference 0.5 so the 0.3 absolute rise stays silent below 1.6x
    Case("ratio-1.49", 0.5, [(2, 0.745), (14, 0.5)], [0, 0], "no-AKI", "none"),
    Case("ratio-1.50", 0.5, [(2, 0.75), (14, 0.5)], [1, 0], "rapidly-reversed", "mild"),
    Case("ratio-1.99", 0.5, [(2, 0.995), (14, 0.5)], [1, 0], "rapidly-reversed", "mild"),
    Case("ratio-2.00", 0.5, [(2, 1.0), (14, 0.5)], [2, 0], "rapidly-reversed", "severe"),
    Case("ratio-2.99", 0.5, [(2, 1.495), (14, 0.5)], [2, 0], "rapidly-reversed", "severe"),
    Case("ratio-3.00", 0.5, [(2, 1.5), (14, 0.5)], [3, 0], "rapidly-reversed", "severe"),
    Case("ratio-1.6-ref-1.0", 1.0, [(2, 1.6)], [1], "persistent-without-recovery", "mild",
         note="unresolved-under-48h"),
    Case("ratio-3.1-ref-1.0", 1.0, [(2, 3.1)], [3], "persistent-without-recovery", "severe",
         note="unresolved-under-48h"),
    # absolute rise boundaries; 2.3 - 2.0 is 0.2999999999999998 in binary
    Case("abs-0.29", 2.0, [(2, 2.29)], [0], "no-AKI", "none"),
    Case("abs-0.30", 2.0, [(2, 2.3)], [1], "persistent-without-recovery", "mild",
         note="unresolved-under-48h"),
    Case("abs-0.35-over-prior", 2.0, [(0, 1.9), (2, 2.25)], [0, 1], "persistent-without-recovery", "mild",
         note="unresolved-under-48h"),
    Case("abs-rolling-nadir", 2.0, [(0, 2.0), (10, 1.9), (30, 2.2)], [0, 0, 1],
         "persistent-without-recovery", "mild", note="unresolved-under-48h"),
    Case("abs-nadir-window-48h-inclusive", 1.2, [(2, 1.0), (50, 1.3)], [0, 1],
         "persistent-without-recovery", "mild", note="unresolved-under-48h"),
    Case("abs-nadir-window-49h-excluded", 1.2, [(2, 1.0), (51, 1.3)], [0, 0], "no-AKI", "none"),
    Case("abs-empty-window-falls-back-to-ref", 2.0, [(0, 1.9), (50, 2.2)], [0, 0], "no-AKI", "none"),
    # relative baseline: minimum over the previous 7 days, inclusive at exactly 7 d
    Case("baseline7-falls-below-ref", 1.0, [(2, 0.5), (14, 0.8)], [0, 1],
         "persistent-without-recovery", "mild", note="unresolved-under-48h"),
    Case("baseline7-window-exactly-7d", 2.0, [(2, 0.9), (170, 1.4)], [0, 1],
         "persistent-without-recovery", "mild", note="unresolved-under-48h"),
    Case("baseline7-window-past-7d", 2.0, [(2, 0.9), (171, 1.4)], [0, 0], "no-AKI", "none"),
    # trajectory boundary at 48 h
    Case("resolve-47h", 1.0, [(2, 1.6), (49, 1.0)], [1, 0], "rapidly-reversed", "mild"),
    Case("resolve-48h", 1.0, [(2, 1.6), (50, 1.0)], [1, 0], "rapidly-reversed", "mild"),
    Case("resolve-49h", 1.0, [(2, 1.6), (51, 1.0)], [1, 0], "persistent-with-recovery", "mild"),
    Case("resolve-96h-severe", 1.0, [(2, 2.2), (50, 2.1), (98, 1.0)], [2, 2, 0],
         "persistent-with-recovery", "severe"),
    # recurrence
    Case("recurrent-rapid-then-rapid", 1.0, [(2, 1.6), (14, 1.0), (26, 1.6), (38, 1.0)], [1, 0, 1, 0],
         "rapidly-reversed", "mild", n_episodes=2),
    Case("recurrent-rapid-then-unresolved", 1.0, [(2, 1.6), (14, 1.0), (26, 2.1), (38, 2.2)], [1, 0, 2, 2],
         "rapidly-reversed", "severe", n_episodes=2),
    Case("stages-1-2-3-unresolved", 1.0, [(2, 1.6), (14, 2.1), (26, 3.2)], [1, 2, 3],
         "persistent-without-recovery", "severe", note="unresolved-under-48h"),
    Case("persistent-unresolved-past-48h", 1.0, [(2, 2.5), (30, 2.4), (60, 2.2)], [2, 2, 2],
         "persistent-without-recovery", "severe"),
    # KRT forces stage 3
    Case("krt-forced", 1.0, [(2, 1.1), (26, 1.2), (60, 1.0)], [0, 3, 3, 0],
         "rapidly-reversed", "severe", krt=[(24, 48)]),
    Case("krt-on-measurement", 1.0, [(2, 1.1), (24, 1.0), (80, 1.0)], [0, 3, 0],
         "persistent-with-recovery", "severe", krt=[(24, 48)]),
    Case("krt-through-discharge", 1.0, [(2, 1.7), (26, 1.2), (50, 1.1)], [1, 3, 3, 3],
         "persistent-without-recovery", "severe", krt=[(24, 72)]),
    # reference anchored inside the 48 h window (min-prior-7d style)
    Case("ref-anchor-in-window", 1.0, [(2, 1.2), (10, 1.3)], [0, 1], "persistent-without-recovery", "mild",
         ref_anchor_h=-20, note="unresolved-under-48h"),
    Case("ref-anchor-outside-window", 1.0, [(2, 1.2), (10, 1.3)], [0, 0], "no-AKI", "none",
         ref_anchor_h=-100),
]
