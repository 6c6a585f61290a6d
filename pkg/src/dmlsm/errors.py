"""Exception hierarchy shared by every layer of the engine and simulator."""


class DmlsmError(Exception):
    pass


# fabric
class InvalidLength(DmlsmError):
    pass


class CapacityExceeded(DmlsmError):
    pass


class OutOfBounds(DmlsmError):
    pass


class NodeDown(DmlsmError):
    def __init__(self, node, msg=None):
        super().__init__(msg or f"node {node} is down")
        self.node = node


# memtable
class MemtableFull(DmlsmError):
    pass


class InvalidState(DmlsmError):
    pass


class OutOfRange(DmlsmError):
    pass


class CorruptIndex(DmlsmError):
    pass


# dm node
class UnknownMemtable(DmlsmError):
    pass


# flush protocol
class WalNotPersisted(DmlsmError):
    pass


class MemtableNotOffloaded(DmlsmError):
    pass


class StaleCommit(DmlsmError):
    pass


class CorruptMessage(DmlsmError):
    pass


# scheduler
class StaleTelemetry(DmlsmError):
    pass


class NoEligibleExecutor(DmlsmError):
    pass


class CorruptLog(DmlsmError):
    pass


# storage
class CorruptBlock(DmlsmError):
    pass


class FileNotFound(DmlsmError):
    pass


class DsWriteFailed(DmlsmError):
    pass


# engine
class Stalled(DmlsmError):
    def __init__(self, cause):
        super().__init__(f"writes stalled ({cause})")
        self.cause = cause


class CorruptWal(DmlsmError):
    pass


class CorruptManifest(DmlsmError):
    pass


class ConfigError(DmlsmError):
    pass
