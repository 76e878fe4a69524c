"""Data-access auditing.

Every split carries the roles it was built from (retain, forget, test, ...).
Code that trains on a split calls ``Split.read("train")``; while a stage is
active, any training access to a role outside the stage's contract raises
``AuditViolation``.
"""

from __future__ import annotations

import contextvars
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field


class AuditViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class AccessEvent:
    stage: str
    purpose: str
    roles: tuple[str, ...]
    n: int


@dataclass
class AccessAudit:
    strict: bool = True
    events: list[AccessEvent] = field(default_factory=list)
    violations: list[AccessEvent] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @contextmanager
    def stage(self, name: str, train_roles):
        token = _active.set((self, name, frozenset(train_roles)))
        try:
            yield self
        finally:
            _active.reset(token)

    def roles_read(self, stage: str | None = None, purpose: str = "train") -> set[str]:
        out: set[str] = set()
        for ev in self.events:
            if ev.purpose == purpose and (stage is None or ev.stage == stage):
                out.update(ev.roles)
        return out

    @property
    def passed(self) -> bool:
        return not self.violations


_active: contextvars.ContextVar = contextvars.ContextVar("unlearnlab_audit", default=None)

# Training-access contracts of the pipeline stages.
CONTRACTS = {
    "pretrain": {"train"},
    "retrain": {"retain"},
    "unlearn": {"retain", "forget"},
    "relearn": {"retain", "forget_re", "pool", "pool_corrupted"},
    "typicality": {"train"},
    "diagnose": set(),
    "attack": set(),
}


def record(roles, purpose: str, n: int) -> None:
    cur = _active.get()
    if cur is None:
        return
    audit, name, allowed = cur
    ev = AccessEvent(name, purpose, tuple(sorted(roles)), int(n))
    with audit._lock:
        audit.events.append(ev)
        bad = purpose == "train" and not set(roles) <= allowed
        if bad:
            audit.violations.append(ev)
    if bad and audit.strict:
        raise AuditViolation(
            f"stage {name!r} trained on {sorted(set(roles) - allowed)}; allowed {sorted(allowed)}")


@contextmanager
def stage(audit: AccessAudit | None, name: str, train_roles=None):
    """Activate ``audit`` for a pipeline stage; a no-op when ``audit`` is None.

    The contract is looked up by the part of ``name`` before any ``:``, so
    ``"unlearn:scrub"`` uses the ``unlearn`` contract.
    """
    if audit is None:
        yield None
        return
    roles = CONTRACTS[name.split(":")[0]] if train_roles is None else train_roles
    with audit.stage(name, roles):
        yield audit
