"""MAC-level hardware cost model for bitwidth plans.

A synthesized lookup table maps each unordered operand-bitwidth pair in
[2, 8] x [2, 8] to the area and power of one multiply-accumulate unit.
For a per-module bitwidth assignment, the aggregate area is the maximum
over the distinct pairs present (the datapath must host the widest unit)
and the aggregate power is the MAC-count-weighted average.
"""

import json
from dataclasses import dataclass
from importlib import resources

# Golden copy of the synthesis results; the shipped JSON must match exactly.
_GOLDEN = {
    (2, 2): (539.960, 0.86949), (2, 3): (551.074, 0.95939),
    (2, 4): (562.363, 1.13939), (2, 5): (571.360, 1.30085),
    (2, 6): (581.062, 1.41680), (2, 7): (597.996, 1.59534),
    (2, 8): (605.405, 1.75574), (3, 3): (571.183, 1.30043),
    (3, 4): (589.882, 1.42975), (3, 5): (602.053, 1.57912),
    (3, 6): (621.634, 1.69105), (3, 7): (638.744, 1.86085),
    (3, 8): (656.737, 1.99110), (4, 4): (608.404, 1.58901),
    (4, 5): (635.569, 1.70870), (4, 6): (660.089, 1.85997),
    (4, 7): (677.200, 1.94706), (4, 8): (702.072, 2.08973),
    (5, 5): (664.499, 1.86345), (5, 6): (695.545, 2.00091),
    (5, 7): (718.301, 2.14442), (5, 8): (749.347, 2.24832),
    (6, 6): (723.593, 2.12107), (6, 7): (770.515, 2.22367),
    (6, 8): (805.090, 2.41882), (7, 7): (817.967, 2.43294),
    (7, 8): (864.889, 2.52819), (8, 8): (893.642, 2.67960),
}

MIN_BITS, MAX_BITS = 2, 8


class CostTableError(ValueError):
    pass


@dataclass(frozen=True)
class AssignmentRow:
    module: str
    weight_bits: int
    act_bits: int
    mac_count: int

    def __post_init__(self):
        if not (MIN_BITS <= self.weight_bits <= MAX_BITS
                and MIN_BITS <= self.act_bits <= MAX_BITS):
            raise CostTableError(
                f"bitwidths out of range for module {self.module!r}"
            )
        if self.mac_count < 0:
            raise CostTableError(f"negative mac_count for module {self.module!r}")


class MacCostTable:
    """Unordered (b1, b2) -> (area, power) lookup, validated at load."""

    def __init__(self, pairs):
        self._pairs = dict(pairs)
        self._validate()

    @classmethod
    def load(cls, path=None):
        if path is None:
            raw = resources.files("tinyqat").joinpath("data/mac_costs.json").read_text()
            doc = json.loads(raw)
        else:
            with open(path) as f:
                doc = json.load(f)
        pairs = {}
        for entry in doc["entries"]:
            b1, b2 = int(entry["bits"][0]), int(entry["bits"][1])
            pairs[(min(b1, b2), max(b1, b2))] = (float(entry["area"]),
                                                 float(entry["power"]))
        return cls(pairs)

    def _validate(self):
        if set(self._pairs) != set(_GOLDEN):
            raise CostTableError("cost table must cover every pair in [2,8]x[2,8]")
        for pair, (area, power) in self._pairs.items():
            if (area, power) != _GOLDEN[pair]:
                raise CostTableError(f"cost table entry {pair} differs from golden")
            if area <= 0 or power <= 0:
                raise CostTableError(f"non-positive cost for {pair}")
        # area never shrinks when either operand widens
        for (b1, b2), (area, _) in self._pairs.items():
            for nb1, nb2 in ((b1 + 1, b2), (b1, b2 + 1)):
                key = (min(nb1, nb2), max(nb1, nb2))
                if key in self._pairs and self._pairs[key][0] < area:
                    raise CostTableError(
                        f"area not monotone from {(b1, b2)} to {key}"
                    )

    def lookup(self, b1, b2):
        """(area, power) for an operand pair, order-insensitive."""
        key = (min(b1, b2), max(b1, b2))
        if key not in self._pairs:
            raise CostTableError(f"bitwidth pair {(b1, b2)} outside [2, 8]")
        return self._pairs[key]


def aggregate(assignment, table):
    """(area, power) of a per-module plan.

    Area is the maximum over distinct bitwidth pairs in the plan; power is
    the MAC-count-weighted average of the per-pair powers.
    """
    rows = list(assignment)
    if not rows:
        raise CostTableError("empty bitwidth assignment")
    total_macs = sum(r.mac_count for r in rows)
    if total_macs <= 0:
        raise CostTableError("assignment must have positive total mac_count")
    area = 0.0
    power_sum = 0.0
    for row in rows:
        a, p = table.lookup(row.weight_bits, row.act_bits)
        area = max(area, a)
        power_sum += row.mac_count * p
    return area, power_sum / total_macs


def load_assignment(path):
    """Read a per-module plan from JSON: a list of row objects."""
    with open(path) as f:
        doc = json.load(f)
    rows = doc["assignment"] if isinstance(doc, dict) else doc
    return [AssignmentRow(module=str(r["module"]),
                          weight_bits=int(r["weight_bits"]),
                          act_bits=int(r["act_bits"]),
                          mac_count=int(r["mac_count"]))
            for r in rows]
