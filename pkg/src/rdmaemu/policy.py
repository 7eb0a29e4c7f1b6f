"""Non-blocking per-operation policies and observability counters.

A policy is evaluated inside the mediator for every data-plane operation.
Rules run in a fixed order (ACL, then size cap, then rate), so tokens are
only consumed by operations that pass the earlier checks.
"""
from __future__ import annotations

import threading
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

from .verbs.types import Opcode

GLOBAL = "global"


class PolicyError(ValueError):
    pass


class Decision(Enum):
    ALLOW = "ALLOW"
    DENY = "DENY"


class DenyReason(Enum):
    RATE = "rate"
    ACL = "acl"
    SIZE = "size"


@dataclass(frozen=True)
class PolicyVerdict:
    decision: Decision
    reason: DenyReason | None = None

    @property
    def allowed(self) -> bool:
        return self.decision is Decision.ALLOW

    def __str__(self):
        return "ALLOW" if self.allowed else f"DENY({self.reason.name})"


ALLOW = PolicyVerdict(Decision.ALLOW)
_DENY = {r: PolicyVerdict(Decision.DENY, r) for r in DenyReason}


@dataclass(frozen=True)
class RateLimit:
    msgs_per_s: float
    bytes_per_s: float
    burst: float

    def validate(self):
        if self.msgs_per_s <= 0 or self.bytes_per_s <= 0:
            raise PolicyError("rates must be positive")
        if self.burst < 1:
            raise PolicyError("burst must be at least 1")


@dataclass(frozen=True)
class AclRule:
    allow: bool
    src_qp: int | None = None     # None is a wildcard
    dst_node: int | None = None
    dst_qp: int | None = None
    opcode: Opcode | None = None

    def matches(self, src_qp, dst_node, dst_qp, opcode) -> bool:
        return ((self.src_qp is None or self.src_qp == src_qp)
                and (self.dst_node is None or self.dst_node == dst_node)
                and (self.dst_qp is None or self.dst_qp == dst_qp)
                and (self.opcode is None or self.opcode == opcode))


@dataclass
class PolicySpec:
    rate_limits: dict[int, RateLimit] = field(default_factory=dict)
    acl: list[AclRule] = field(default_factory=list)
    size_caps: dict[int, int] = field(default_factory=dict)
    counters: bool = True

    def validate(self) -> "PolicySpec":
        for rl in self.rate_limits.values():
            rl.validate()
        for qp, cap in self.size_caps.items():
            if cap < 0:
                raise PolicyError(f"negative size cap for qp {qp}")
        return self

    @classmethod
    def allow_all(cls) -> "PolicySpec":
        return cls()

    @classmethod
    def deny_all(cls) -> "PolicySpec":
        return cls(acl=[AclRule(False)])

    @classmethod
    def parse(cls, text: str) -> "PolicySpec":
        spec = cls()

        def field_(tok, conv=int):
            return None if tok == "*" else conv(tok)

        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            try:
                kind = parts[0]
                if kind == "rate" and len(parts) == 5:
                    spec.rate_limits[int(parts[1], 0)] = RateLimit(
                        float(parts[2]), float(parts[3]), float(parts[4]))
                elif kind == "acl" and len(parts) == 6:
                    if parts[1] not in ("allow", "deny"):
                        raise PolicyError(f"acl action must be allow or deny, got {parts[1]!r}")
                    spec.acl.append(AclRule(parts[1] == "allow",
                                            field_(parts[2], lambda t: int(t, 0)),
                                            field_(parts[3]),
                                            field_(parts[4], lambda t: int(t, 0)),
                                            field_(parts[5], Opcode.parse)))
                elif kind == "cap" and len(parts) == 3:
                    spec.size_caps[int(parts[1], 0)] = int(parts[2])
                else:
                    raise PolicyError(f"unrecognised directive {line!r}")
            except (ValueError, KeyError) as exc:
                raise PolicyError(f"policy line {lineno}: {exc}") from None
        return spec.validate()

    @classmethod
    def from_file(cls, path) -> "PolicySpec":
        with open(path) as fh:
            return cls.parse(fh.read())


class TokenBucket:
    def __init__(self, rate: float, depth: float, now: float = 0.0):
        self.rate = rate
        self.depth = depth
        self.tokens = depth
        self.stamp = now

    def refill(self, now: float) -> None:
        if now > self.stamp:
            self.tokens = min(self.depth, self.tokens + (now - self.stamp) * self.rate)
            self.stamp = now

    def has(self, n: float) -> bool:
        return self.tokens >= n


@dataclass
class Counters:
    per_qp: dict[int, Counter]
    totals: Counter

    def get(self, name: str, qp: int | str = GLOBAL) -> int:
        src = self.totals if qp == GLOBAL else self.per_qp.get(qp, Counter())
        return src.get(name, 0)

    def lines(self) -> list[str]:
        out = [f"counter {k} global {v}" for k, v in sorted(self.totals.items())]
        for qp in sorted(self.per_qp):
            out += [f"counter {k} {qp} {v}" for k, v in sorted(self.per_qp[qp].items())]
        return out


class PolicyEngine:
    def __init__(self, spec: PolicySpec | None = None):
        self._lock = threading.Lock()
        self._spec = (spec or PolicySpec()).validate()
        self._buckets: dict[int, tuple[TokenBucket, TokenBucket]] = {}
        self._per_qp: dict[int, Counter] = {}
        self._totals: Counter = Counter()

    @property
    def spec(self) -> PolicySpec:
        return self._spec

    def install(self, spec: PolicySpec) -> None:
        spec.validate()
        with self._lock:
            self._spec = spec
            self._buckets = {}

    def _bump(self, qp: int, name: str, n: int = 1) -> None:
        c = self._per_qp.get(qp)
        if c is None:
            c = self._per_qp[qp] = Counter()
        c[name] += n
        self._totals[name] += n

    def check(self, desc, now: float) -> PolicyVerdict:
        """Decide ``desc`` at time ``now``; never waits."""
        with self._lock:
            spec = self._spec
            qp = desc.qp_num
            opcode = Opcode(desc.opcode)
            verdict = ALLOW
            if spec.acl:
                dst_node, dst_qp = desc.dest if desc.dest is not None else (None, None)
                for rule in spec.acl:
                    if rule.matches(qp, dst_node, dst_qp, opcode):
                        if not rule.allow:
                            verdict = _DENY[DenyReason.ACL]
                        break
            sending = desc.kind == 0
            n = desc.length
            if verdict.allowed and sending:
                cap = spec.size_caps.get(qp)
                if cap is not None and n > cap:
                    verdict = _DENY[DenyReason.SIZE]
            if verdict.allowed and sending:
                rl = spec.rate_limits.get(qp)
                if rl is not None:
                    pair = self._buckets.get(qp)
                    if pair is None:
                        depth_b = rl.burst * rl.bytes_per_s / rl.msgs_per_s
                        pair = self._buckets[qp] = (TokenBucket(rl.msgs_per_s, rl.burst, now),
                                                    TokenBucket(rl.bytes_per_s, depth_b, now))
                    msgs, nbytes = pair
                    msgs.refill(now)
                    nbytes.refill(now)
                    # a message larger than the byte burst passes on a full bucket
                    if msgs.has(1) and (nbytes.has(n) or nbytes.tokens >= nbytes.depth):
                        msgs.tokens -= 1
                        nbytes.tokens -= n
                    else:
                        verdict = _DENY[DenyReason.RATE]
            if spec.counters:
                if verdict.allowed:
                    self._bump(qp, "msgs_posted")
                    self._bump(qp, "bytes_allowed", n if sending else 0)
                    self._bump(qp, f"op_{opcode.name}")
                else:
                    self._bump(qp, f"msgs_denied_{verdict.reason.value}")
            return verdict

    def snapshot_counters(self) -> Counters:
        with self._lock:
            return Counters({q: Counter(c) for q, c in self._per_qp.items()}, Counter(self._totals))
