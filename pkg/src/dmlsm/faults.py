"""Fault injection: named phase hooks plus time-based crash schedules.

A schedule file has one directive per line (``#`` starts a comment)::

    at=150000 crash=dm0
    at=400000 restart=dm0
    hook=exec.mid_write action=crash node=cn1
    hook=ds.write action=fail skip=2
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .fabric import NodeId
from .flush_protocol import ControlKind
from .scheduler import LOG_HOOKS

MESSAGE_HOOKS = tuple(f"msg.{k.name.lower()}" for k in ControlKind)

HOOKS = frozenset({
    "offload.before_commit",
    "owner.before_prepare",
    "dm.accept_offload",
    "exec.before_accept",
    "exec.before_fetch",
    "exec.after_fetch",
    "exec.mid_write",
    "exec.after_write",
    "finalize.before_manifest",
    "finalize.after_manifest",
    "ds.write",
    *LOG_HOOKS,
    *MESSAGE_HOOKS,
})

ACTIONS = ("crash", "fail")


@dataclass
class HookRule:
    hook: str
    action: str = "crash"
    node: NodeId | None = None  # None matches any node
    skip: int = 0  # let this many matching hits pass first
    times: int = 1
    restart_after_us: float | None = None

    def __post_init__(self):
        if self.hook not in HOOKS:
            raise ConfigError(f"unknown fault hook {self.hook!r}")
        if self.action not in ACTIONS:
            raise ConfigError(f"unknown fault action {self.action!r}")


@dataclass
class TimedFault:
    at_us: float
    action: str  # crash | restart
    node: NodeId


@dataclass
class FaultSchedule:
    rules: list[HookRule] = field(default_factory=list)
    timed: list[TimedFault] = field(default_factory=list)

    @classmethod
    def parse(cls, text: str) -> "FaultSchedule":
        sched = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                kv = dict(tok.split("=", 1) for tok in line.split())
            except ValueError:
                raise ConfigError(f"line {lineno}: expected key=value tokens") from None
            try:
                if "hook" in kv:
                    node = NodeId.parse(kv["node"]) if "node" in kv else None
                    restart = float(kv["restart_after"]) if "restart_after" in kv else None
                    sched.rules.append(HookRule(kv["hook"], kv.get("action", "crash"), node,
                                                int(kv.get("skip", 0)), int(kv.get("times", 1)), restart))
                elif "at" in kv:
                    verbs = [v for v in ("crash", "restart") if v in kv]
                    if len(verbs) != 1:
                        raise ConfigError("timed fault needs exactly one of crash= or restart=")
                    sched.timed.append(TimedFault(float(kv["at"]), verbs[0], NodeId.parse(kv[verbs[0]])))
                else:
                    raise ConfigError("directive needs hook= or at=")
            except (KeyError, ValueError) as e:
                raise ConfigError(f"line {lineno}: {e}") from None
        return sched

    @classmethod
    def load(cls, path) -> "FaultSchedule":
        return cls.parse(Path(path).read_text())


class FaultInjector:
    """Answers ``hit(name, node)`` for instrumented code paths.

    A truthy return tells the caller to stop the current step.  With action
    ``crash`` the node has already been crashed through the cluster when the
    call returns.
    """

    def __init__(self, cluster=None, rules: list[HookRule] | None = None):
        self.cluster = cluster
        self.rules = list(rules or [])
        self.fired: list[tuple[float, str, NodeId, str]] = []
        self.observed: list[tuple[str, NodeId]] = []

    def add(self, hook: str, action: str = "crash", node: NodeId | None = None, skip: int = 0,
            times: int = 1, restart_after_us: float | None = None) -> HookRule:
        rule = HookRule(hook, action, node, skip, times, restart_after_us)
        self.rules.append(rule)
        return rule

    def clear(self) -> None:
        self.rules.clear()

    def hit(self, name: str, node: NodeId) -> str | None:
        self.observed.append((name, node))
        for rule in self.rules:
            if rule.hook != name or rule.times <= 0 or (rule.node is not None and rule.node != node):
                continue
            if rule.skip > 0:
                rule.skip -= 1
                continue
            rule.times -= 1
            now = self.cluster.fabric.now if self.cluster is not None else 0.0
            self.fired.append((now, name, node, rule.action))
            if rule.action == "crash" and self.cluster is not None:
                self.cluster.crash(node, restart_after_us=rule.restart_after_us)
            return rule.action
        return None

    def install(self, schedule: FaultSchedule) -> None:
        self.rules.extend(schedule.rules)
        if self.cluster is None:
            return
        for tf in schedule.timed:
            if tf.action == "crash":
                self.cluster.at(tf.at_us, lambda n=tf.node: self.cluster.crash(n))
            else:
                self.cluster.at(tf.at_us, lambda n=tf.node: self.cluster.restart(n))


__all__ = ["ACTIONS", "FaultInjector", "FaultSchedule", "HOOKS", "HookRule", "MESSAGE_HOOKS", "TimedFault"]
