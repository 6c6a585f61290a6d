import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmlsm.ds_storage import FileMeta
from dmlsm.encoding import DurableLog
from dmlsm.errors import CorruptLog, NoEligibleExecutor, StaleTelemetry
from dmlsm.fabric import SCHEDULER_ID, Fabric, cn, dm
from dmlsm.flush_protocol import ControlKind, ControlMessage, EngineSnapshot, ExecutionMode, MemtableView, build_package
from dmlsm.scheduler import (
    LOG_HOOKS, Heartbeat, LoadTelemetry, LogKind, Scheduler, SchedulerConfig, SchedulerLogRecord,
    SchedulerWeights, assignment_cost, load_factor, mode_for, recover, select_executor,
)

from helpers import lost_keys, scheduler_crash_run


def _t(node, u, at=0.0):
    return LoadTelemetry(node, *u, reported_at=at)


# ----------------------------------------------------------- cost model
def test_load_factor_examples():
    assert load_factor(_t(cn(1), (0, 0, 0))) == 0
    assert load_factor(_t(cn(1), (0.05, 0.03, 0.02))) == pytest.approx(0.1)
    assert load_factor(_t(cn(1), (0.5, 0, 0)), SchedulerWeights(2, 1, 1)) == pytest.approx(1.0)


def test_telemetry_clamped():
    t = LoadTelemetry(cn(1), 1.7, -0.2, 0.5)
    assert (t.u_cpu, t.u_io, t.u_queue) == (1.0, 0.0, 0.5)
    with pytest.raises(ValueError):
        SchedulerWeights(-1.0)


def test_stale_telemetry():
    t = _t(cn(1), (0, 0, 0), at=0.0)
    assert load_factor(t, now=200_000.0) == 0
    with pytest.raises(StaleTelemetry):
        load_factor(t, now=200_001.0)


def test_assignment_cost_examples():
    assert assignment_cost(64, 0.1) == pytest.approx(70.4)
    assert assignment_cost(64, 0.9) == pytest.approx(121.6)
    assert assignment_cost(37.5, 0) == 37.5
    with pytest.raises(ValueError):
        assignment_cost(0, 0.1)


def test_select_prefers_low_load():
    a, b = _t(cn(1), (0.05, 0.03, 0.02)), _t(cn(2), (0.5, 0.2, 0.2))
    assert select_executor(64, cn(0), [b, a]) == (cn(1), ExecutionMode.REMOTE_CN)
    assert select_executor(64, cn(0), [b]) == (cn(2), ExecutionMode.REMOTE_CN)
    with pytest.raises(NoEligibleExecutor):
        select_executor(64, cn(0), [])


def test_modes_and_ties():
    assert mode_for(cn(0), cn(0)) == ExecutionMode.LOCAL
    assert mode_for(dm(3), cn(0)) == ExecutionMode.IN_DM
    assert mode_for(cn(2), cn(0)) == ExecutionMode.REMOTE_CN
    pool = [_t(n, (0.2, 0, 0)) for n in (dm(0), cn(2), cn(1), cn(0))]
    assert select_executor(1, cn(1), pool) == (cn(1), ExecutionMode.LOCAL)
    assert select_executor(1, cn(5), pool)[0] == cn(0)


def test_stale_and_disallowed_skipped():
    pool = [_t(cn(1), (0, 0, 0), at=0.0), _t(cn(2), (0.9, 0.9, 0.9), at=500_000.0)]
    assert select_executor(1, cn(0), pool, now=500_000.0)[0] == cn(2)
    with pytest.raises(NoEligibleExecutor):
        select_executor(1, cn(0), pool, now=500_000.0, allowed=lambda n, m: n != cn(2))


_node = st.sampled_from([cn(0), cn(1), cn(2), cn(3), dm(0), dm(1)])
_u = st.floats(0, 1)


@given(st.lists(st.tuples(_node, _u, _u, _u), min_size=1, max_size=6, unique_by=lambda x: x[0]),
       st.floats(0.01, 512), st.tuples(st.floats(0, 4), st.floats(0, 4), st.floats(0, 4)), st.floats(0.1, 10))
@settings(max_examples=200)
def test_select_equals_brute_force(rows, mb, w, scale):
    pool = [LoadTelemetry(n, a, b, c) for n, a, b, c in rows]
    weights = SchedulerWeights(*w)
    owner = cn(0)
    costs = {t.node: mb * (1 + w[0] * t.u_cpu + w[1] * t.u_io + w[2] * t.u_queue) for t in pool}
    best = min(costs.values())
    node, _ = select_executor(mb, owner, pool, weights)
    assert costs[node] == pytest.approx(best, rel=1e-9, abs=1e-12)
    scaled = SchedulerWeights(*(x * scale for x in w))
    node2, _ = select_executor(mb, owner, pool, scaled)
    assert costs[node2] == pytest.approx(best, rel=1e-9, abs=1e-12)


# ------------------------------------------------------------------ log
def test_log_record_round_trip():
    for rec in (SchedulerLogRecord(LogKind.JOB_ENQUEUED, 7, None, b"12345678", 0, cn(0), b"pkg"),
                SchedulerLogRecord(LogKind.JOB_ASSIGNED, 7, dm(1), bytes(8), 3, cn(0)),
                SchedulerLogRecord(LogKind.JOB_PARKED, 2**63, None)):
        assert SchedulerLogRecord.decode(rec.encode()) == rec
    with pytest.raises(CorruptLog):
        SchedulerLogRecord.decode(rec.encode()[:-1])


def test_recover_replays_states():
    log = DurableLog()
    for rec in (SchedulerLogRecord(LogKind.JOB_ENQUEUED, 1, owner=cn(0), payload=b"a"),
                SchedulerLogRecord(LogKind.JOB_ENQUEUED, 2, owner=cn(1), payload=b"b"),
                SchedulerLogRecord(LogKind.JOB_ASSIGNED, 1, dm(0), attempt=2),
                SchedulerLogRecord(LogKind.COMMIT_RECEIVED, 1, dm(0), payload=b"commit"),
                SchedulerLogRecord(LogKind.JOB_ASSIGNED, 2, cn(2))):
        log.append(rec.encode())
    log.sync()
    jobs = recover(log)
    assert jobs[1].state == LogKind.COMMIT_RECEIVED and jobs[1].commit == b"commit" and jobs[1].attempt == 2
    assert jobs[2].state == LogKind.JOB_ASSIGNED and jobs[2].executor == cn(2) and jobs[2].owner == cn(1)


def test_recover_empty_and_torn():
    assert recover(DurableLog()) == {}
    log = DurableLog()
    log.append(SchedulerLogRecord(LogKind.JOB_ENQUEUED, 1, owner=cn(0)).encode())
    log.append(SchedulerLogRecord(LogKind.JOB_ASSIGNED, 1, dm(0)).encode())
    log.sync()
    log.corrupt_tail(3)
    jobs = recover(log)
    assert jobs[1].state == LogKind.JOB_ENQUEUED and log.truncated_bytes > 0


def test_recover_rejects_orphan_record():
    log = DurableLog()
    log.append(SchedulerLogRecord(LogKind.JOB_ASSIGNED, 9, dm(0)).encode())
    with pytest.raises(CorruptLog):
        recover(log)


# --------------------------------------------------------- dispatching
class FakeExecutor:
    """Accepts every ASSIGN and commits as soon as the package arrives; silent ones ignore all."""

    def __init__(self, h, node, silent=False):
        self.h, self.node, self.silent = h, node, silent
        self.assigned = []

    def on_message(self, ev):
        msg = ev.payload
        if isinstance(msg, ControlMessage) and msg.kind == ControlKind.ASSIGN:
            attempt, _, body = msg.assign_fields()
            if not body:
                self.assigned.append(msg.job_id)
            if self.silent:
                return
            if not body:
                self.h.f.send_message(self.node, SCHEDULER_ID, ControlMessage.accept(msg.job_id, attempt))
            else:
                meta = FileMeta(msg.job_id, 0, b"a", b"b", 1, 1, 100, 1, owner=cn(0))
                self.h.f.send_message(self.node, SCHEDULER_ID, ControlMessage.commit(msg.job_id, attempt, meta))


class FakeOwner:
    def __init__(self, h):
        self.h = h

    def on_message(self, ev):
        msg = ev.payload
        if isinstance(msg, ControlMessage) and msg.kind == ControlKind.COMMIT:
            self.h.f.send_message(cn(0), SCHEDULER_ID, ControlMessage(ControlKind.ACK, msg.job_id))

    def on_undeliverable(self, ev):
        pass

    def on_undeliverable(self, ev):
        pass


class Harness:
    def __init__(self, executors, **cfg):
        self.f = Fabric()
        self.sched = Scheduler(SCHEDULER_ID, self.f, SchedulerConfig(**cfg), DurableLog())
        self.f.register_node(SCHEDULER_ID, self.sched)
        self.f.register_node(cn(0), FakeOwner(self))
        self.ex = {}
        for node, silent in executors:
            self.ex[node] = FakeExecutor(self, node, silent)
            self.f.register_node(node, self.ex[node])

    def beat(self, node, u=(0.0, 0.0, 0.0)):
        self.f.send_message(node, SCHEDULER_ID, Heartbeat(LoadTelemetry(node, *u)))
        self.f.run_until(self.f.now + 100)

    def prepare(self, job_id, mb=1):
        view = MemtableView(job_id, True, False, dm(0), 1, 1, 0, 10, (0,), (mb << 20,))
        pkg = build_package(EngineSnapshot(cn(0), 0, 10, 10, 1, 1), 0, [view], job_id, 8 * job_id)
        self.f.send_message(cn(0), SCHEDULER_ID, ControlMessage(ControlKind.PREPARE, job_id, pkg.encode()))
        self.f.run_until(self.f.now + 100)

    def advance(self, us):
        self.f.run_until(self.f.now + us)


def test_fifo_dispatch_order():
    h = Harness([(cn(1), False), (cn(2), False)])
    h.beat(cn(1))
    h.beat(cn(2))
    for j in (1, 2, 3):
        h.prepare(j)
    assert h.sched.assign_order == [1, 2, 3]
    assert all(h.sched.trace_of(j) == "PSACK" for j in (1, 2, 3))


def test_timeout_redispatches_next_when_later_jobs_already_out():
    h = Harness([(cn(1), True)])
    h.beat(cn(1))
    for j in (1, 2, 3):
        h.prepare(j)
    for _ in range(6):
        h.advance(90_000)
        h.beat(cn(1))
    assert h.sched.assign_order[:6] == [1, 2, 3, 1, 2, 3]
    assert h.sched.trace_of(1).startswith("PSTS")


def test_timeout_requeues_ahead_of_waiting_job():
    h = Harness([(cn(1), True), (cn(2), False)], pinned_executor=None)
    h.beat(cn(1))
    h.prepare(1)  # goes to the silent cn1
    h.advance(250_000)  # cn1 heartbeats stop: stale
    h.prepare(2)  # nobody eligible: waits in the queue
    assert h.sched.assign_order == [1] and list(h.sched.queue) == [2]
    h.advance(300_000)  # job 1 times out and goes back to the head
    assert list(h.sched.queue) == [1, 2]
    h.beat(cn(2))
    assert h.sched.assign_order == [1, 1, 2]
    assert h.ex[cn(2)].assigned == [1, 2]


def test_missed_heartbeats_block_new_work():
    h = Harness([(cn(1), False), (cn(2), False)])
    h.beat(cn(1), (0.0, 0.0, 0.0))
    h.beat(cn(2), (0.8, 0.0, 0.0))
    h.prepare(1)
    assert h.ex[cn(1)].assigned == [1]
    h.advance(150_000)
    h.beat(cn(2), (0.8, 0.0, 0.0))
    h.advance(60_000)
    h.beat(cn(2), (0.8, 0.0, 0.0))  # cn1 silent for > 2 intervals
    h.prepare(2)
    assert h.ex[cn(2)].assigned == [2]
    h.beat(cn(1))
    h.prepare(3)
    assert h.ex[cn(1)].assigned == [1, 3]


def test_max_attempts_parks_job():
    h = Harness([(cn(1), True)], max_attempts=3)
    h.beat(cn(1))
    h.prepare(1)
    for _ in range(20):
        h.advance(90_000)
        h.beat(cn(1))
    assert h.sched.parked == [1] and 1 not in h.sched.jobs
    assert h.sched.trace_of(1) == "PSTSTST"
    kinds = [SchedulerLogRecord.decode(r).kind for r in h.sched.log.records()]
    assert kinds[-1] == LogKind.JOB_PARKED


def test_restarted_executor_jobs_requeued():
    h = Harness([(cn(1), True), (cn(2), False)])
    h.f.send_message(cn(1), SCHEDULER_ID, Heartbeat(LoadTelemetry(cn(1), 0, 0, 0, boot=1)))
    h.advance(100)
    h.prepare(1)
    assert h.ex[cn(1)].assigned == [1]
    h.beat(cn(2), (0.5, 0.5, 0.5))
    h.f.send_message(cn(1), SCHEDULER_ID, Heartbeat(LoadTelemetry(cn(1), 0.9, 0.9, 0.9, boot=2)))
    h.advance(100)
    assert h.ex[cn(2)].assigned == [1]
    assert h.sched.trace_of(1) == "PSTSACK"


def test_assignment_counts_follow_cost_oracle():
    rng = random.Random(5)
    means = {cn(1): 0.1, cn(2): 0.4, dm(0): 0.8}
    h = Harness([(n, False) for n in means])
    oracle = Counter()
    for j in range(1, 101):
        loads = {}
        for n, m in means.items():
            u = tuple(min(1.0, max(0.0, rng.gauss(m, 0.25))) for _ in range(3))
            loads[n] = sum(u)
            h.beat(n, u)
        oracle[min(loads, key=lambda n: (loads[n], n))] += 1
        h.prepare(j)
        h.advance(100_000)
    got = Counter(h.sched.assignments)
    for n in means:
        assert abs(got[n] - oracle[n]) <= 0.2 * max(oracle[n], 1)
    assert got[cn(1)] > got[cn(2)] > got[dm(0)]


# ------------------------------------------------------- crash recovery
@pytest.fixture(scope="module")
def crash_free():
    c, _, shadow = scheduler_crash_run()
    return c, shadow


@pytest.mark.parametrize("hook", [h for h in LOG_HOOKS if "parked" not in h])
def test_scheduler_crash_points(crash_free, hook):
    base, _ = crash_free
    c, snaps, shadow = scheduler_crash_run([hook], skip=1)
    assert c.faults.fired and snaps
    e = c.engine()
    assert all(n == 1 for n in c.finalizes.values())
    committed = [j for j, r in snaps[0].items() if r.state == LogKind.COMMIT_RECEIVED]
    pending = [j for j, r in snaps[0].items() if r.state in (LogKind.JOB_ENQUEUED, LogKind.JOB_ASSIGNED)]
    assert all(c.finalizes[j] == 1 for j in committed)
    assert all(c.finalizes[j] == 0 for j in pending)
    if pending:
        assert any(job.status == "abandoned" for job in e.jobs.values())
    assert not lost_keys(c, shadow) and not e.mems
    assert sorted(f.entries for f in e.live_files()) == sorted(f.entries for f in base.engine().live_files())


@pytest.mark.parametrize("hook", ["sched.before_job_parked", "sched.after_job_parked"])
def test_scheduler_crash_while_parking(hook):
    c, snaps, shadow = scheduler_crash_run(["sched.after_job_enqueued", hook])
    assert [f[1] for f in c.faults.fired][:2] == ["sched.after_job_enqueued", hook]
    assert all(n == 1 for n in c.finalizes.values())
    assert not lost_keys(c, shadow) and not c.engine().mems


def test_crash_with_empty_log_is_clean():
    c, snaps, shadow = scheduler_crash_run(puts=0)
    c.crash(SCHEDULER_ID, restart_after_us=1000)
    c.run(10_000)
    assert snaps == [{}] and not c.scheduler.jobs and not c.scheduler.queue
