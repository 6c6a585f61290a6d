"""Assembles compute, memory and storage nodes plus the scheduler on one fabric."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .dm_node import DmNode
from .ds_storage import DsNode, FileMeta
from .encoding import DurableLog
from .engine import Engine, EngineConfig
from .fabric import HARNESS, Fabric, LatencyModel, NodeId, NodeKind, SCHEDULER_ID, cn, dm, ds
from .faults import FaultInjector
from .flush_protocol import ControlMessage, Executor, ExecutorConfig
from .scheduler import Scheduler, SchedulerConfig

DM_FAILURE_DETECT_US = 200_000.0


@dataclass
class ClusterConfig:
    compute_nodes: int = 1
    dm_nodes: int = 1
    ds_nodes: int = 1
    engine: EngineConfig = field(default_factory=EngineConfig)
    latency: LatencyModel = field(default_factory=LatencyModel)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    executor: ExecutorConfig = field(default_factory=ExecutorConfig)
    dm_memory_bytes: int | None = None
    dm_workers: int = 4
    dm_failure_detect_us: float = DM_FAILURE_DETECT_US
    backing_dir: str | None = None
    trace: bool = False
    window_us: float = 1000.0


class ComputeNode:
    """Fabric handler for a CN: routes ASSIGN to its executor, the rest to its engine."""

    def __init__(self, cluster: "Cluster", node_id: NodeId):
        self.cluster = cluster
        self.node_id = node_id
        self.wal_log = DurableLog()
        self.manifest_log = DurableLog()
        cfg = cluster.config
        self.executor = Executor(node_id, cluster.fabric, cluster.ds_for, self.local_block, cfg.executor,
                                 cluster.faults)
        self.engine = Engine(node_id, cluster.fabric, cfg.engine, list(cluster.dms), cluster.ds_for(None),
                             self.wal_log, self.manifest_log, SCHEDULER_ID, cluster.dms, cluster.faults,
                             observer=cluster)

    def local_block(self, owner: NodeId, mem_id: int, shard: int) -> bytes:
        e = self.engine.mems.get(mem_id)
        if owner != self.node_id or e is None or e.memtable is None:
            raise KeyError(mem_id)
        return bytes(e.memtable.blocks[shard].buf)

    def on_message(self, ev) -> None:
        if not self.executor.on_message(ev):
            self.engine.on_message(ev)

    def on_undeliverable(self, ev) -> None:
        self.executor.on_undeliverable(ev)
        self.engine.on_undeliverable(ev)

    def on_crash(self) -> None:
        self.engine.on_crash()
        self.executor.on_crash()

    def on_restart(self) -> None:
        self.engine.on_restart()
        self.executor.on_restart()


class _Tap:
    """Wraps a node handler to expose control-message deliveries as fault hooks."""

    def __init__(self, cluster: "Cluster", node_id: NodeId, inner):
        self.cluster = cluster
        self.node_id = node_id
        self.inner = inner

    def on_message(self, ev) -> None:
        msg = ev.payload
        if isinstance(msg, ControlMessage):
            self.cluster.deliveries[(msg.kind.name.lower(), self.node_id)] += 1
            if self.cluster.faults.hit(f"msg.{msg.kind.name.lower()}", self.node_id):
                if not self.cluster.fabric.is_alive(self.node_id):
                    return
        self.inner.on_message(ev)

    def __getattr__(self, name):
        return getattr(self.inner, name)


class Cluster:
    def __init__(self, config: ClusterConfig | None = None):
        self.config = cfg = config or ClusterConfig()
        self.fabric = Fabric(cfg.latency, trace=cfg.trace, window_us=cfg.window_us)
        self.faults = FaultInjector(self)
        self.finalizes: Counter[int] = Counter()
        self.deliveries: Counter[tuple[str, NodeId]] = Counter()
        self.crash_log: list[tuple[float, str, NodeId]] = []
        fab = self.fabric

        self.ds_nodes: dict[NodeId, DsNode] = {}
        for i in range(cfg.ds_nodes):
            nid = ds(i)
            backing = f"{cfg.backing_dir}/{nid}" if cfg.backing_dir else None
            node = DsNode(nid, fab, backing, fault_hook=lambda name, info: bool(self.faults.hit(name, info["writer"])))
            fab.register_node(nid, node)
            self.ds_nodes[nid] = node

        self.scheduler = Scheduler(SCHEDULER_ID, fab, cfg.scheduler, DurableLog(), self.faults, self._delete_file)
        fab.register_node(SCHEDULER_ID, _Tap(self, SCHEDULER_ID, self.scheduler))

        self.dms: dict[NodeId, DmNode] = {}
        for i in range(cfg.dm_nodes):
            nid = dm(i)
            node = DmNode(nid, fab, cfg.dm_workers, bits_per_key=cfg.engine.bits_per_key)
            node.faults = self.faults
            node.executor = Executor(nid, fab, self.ds_for, None, cfg.executor, self.faults)
            fab.register_node(nid, _Tap(self, nid, node), memory_budget=cfg.dm_memory_bytes)
            self.dms[nid] = node

        self.cns: dict[NodeId, ComputeNode] = {}
        for i in range(cfg.compute_nodes):
            nid = cn(i)
            fab.register_node(nid)
            node = ComputeNode(self, nid)
            fab.set_handler(nid, _Tap(self, nid, node))
            self.cns[nid] = node

        for node in self.dms.values():
            node.executor.start_heartbeats()
        for node in self.cns.values():
            node.executor.start_heartbeats()

    # ---------------------------------------------------------- access
    def engine(self, i: int = 0) -> Engine:
        return self.cns[cn(i)].engine

    def ds_for(self, node: NodeId | None) -> DsNode:
        if node is None:
            return next(iter(self.ds_nodes.values()))
        return self.ds_nodes[node]

    def _delete_file(self, meta: FileMeta) -> None:
        owner = self.cns.get(meta.owner) if meta.owner is not None else None
        if owner is not None and meta.name in owner.engine.manifest.version.files:
            return
        self.ds_for(meta.ds).delete(meta.name)

    def on_finalize(self, owner: NodeId, job_id: int, meta: FileMeta) -> None:
        self.finalizes[job_id] += 1

    # ---------------------------------------------------------- faults
    def at(self, t_us: float, action) -> None:
        self.fabric.schedule(max(0.0, t_us - self.fabric.now), action)

    def crash(self, node: NodeId, restart_after_us: float | None = None) -> None:
        fab = self.fabric
        if not fab.is_alive(node):
            return
        fab.crash(node)
        self.crash_log.append((fab.now, "crash", node))
        if node.kind == NodeKind.DM:
            def notify():
                for c in self.cns.values():
                    if fab.is_alive(c.node_id):
                        c.engine.on_peer_failure(node)

            fab.schedule(self.config.dm_failure_detect_us, notify)
        if restart_after_us is not None:
            fab.schedule(restart_after_us, lambda: self.restart(node))

    def restart(self, node: NodeId) -> None:
        if self.fabric.is_alive(node):
            return
        self.fabric.restart(node)
        self.crash_log.append((self.fabric.now, "restart", node))

    def restart_all(self) -> None:
        for node in self.fabric.nodes():
            if node != HARNESS and not self.fabric.is_alive(node):
                self.restart(node)

    # ----------------------------------------------------------- clock
    def run(self, us: float) -> None:
        self.fabric.sleep(us)

    def settle(self, max_us: float = 60e6) -> None:
        """Pump until every engine has nothing pending or the horizon passes."""
        deadline = self.fabric.now + max_us

        def busy():
            return any(c.engine.mems or c.engine._running_compactions for c in self.cns.values()
                       if self.fabric.is_alive(c.node_id))

        self.fabric.run_while(busy, deadline)


__all__ = ["Cluster", "ClusterConfig", "ComputeNode", "DM_FAILURE_DETECT_US"]
