"""Exception hierarchy shared by all miniflow components."""


class MiniflowError(Exception):
    """Base class for every error raised by this package."""


# --- envelope format ---------------------------------------------------------

class EnvelopeError(MiniflowError):
    pass


class MetadataTooLarge(EnvelopeError):
    pass


class DuplicateKey(EnvelopeError):
    pass


class BufferTooSmall(EnvelopeError):
    pass


class BadMagic(EnvelopeError):
    pass


class UnsupportedVersion(EnvelopeError):
    pass


class BadElementType(EnvelopeError):
    pass


class TruncatedBuffer(EnvelopeError):
    pass


class MalformedMetadata(EnvelopeError):
    pass


# --- shared memory pool ------------------------------------------------------

class PoolError(MiniflowError):
    pass


class OsAllocationFailed(PoolError):
    pass


class UnknownBlock(PoolError):
    pass


class NotInUse(PoolError):
    pass


class NoSuchObject(PoolError):
    pass


class SizeMismatch(PoolError):
    pass


# --- dataflow specification --------------------------------------------------

class SpecError(MiniflowError):
    pass


class SpecSyntaxError(SpecError):
    pass


class UnknownKey(SpecError):
    pass


class MissingField(SpecError):
    pass


class BadTimerSyntax(SpecError):
    pass


# --- control protocol --------------------------------------------------------

class ProtocolError(MiniflowError):
    pass


class UnknownTag(ProtocolError):
    pass


class Truncated(ProtocolError):
    pass


class OversizeFrame(ProtocolError):
    pass


class ConnectionClosed(ProtocolError):
    pass


# --- daemon ------------------------------------------------------------------

class DaemonError(MiniflowError):
    pass


class SpawnFailed(DaemonError):
    def __init__(self, node_id: str, detail: str):
        super().__init__(f"failed to spawn node {node_id!r}: {detail}")
        self.node_id = node_id
        self.detail = detail


class DuplicateDataflow(DaemonError):
    pass


class ReadinessTimeout(DaemonError):
    pass


class UnknownRoute(DaemonError):
    pass


class UnknownDataflow(DaemonError):
    pass


class PeerUnreachable(DaemonError):
    pass


# --- coordinator -------------------------------------------------------------

class CoordinatorError(MiniflowError):
    pass


class ValidationFailed(CoordinatorError):
    def __init__(self, diagnostics):
        super().__init__("dataflow validation failed:\n" + "\n".join(str(d) for d in diagnostics))
        self.diagnostics = list(diagnostics)


class UnknownMachine(CoordinatorError):
    pass


class NotFound(CoordinatorError):
    pass


class AlreadyStopped(CoordinatorError):
    pass


class DaemonUnreachable(CoordinatorError):
    pass


# --- node API ----------------------------------------------------------------

class NodeApiError(MiniflowError):
    pass


class MissingEnv(NodeApiError):
    pass


class ConnectFailed(NodeApiError):
    pass


class SecondInit(NodeApiError):
    pass


class UndeclaredOutput(NodeApiError):
    pass


class ConnectionLost(NodeApiError):
    pass


# --- CLI ---------------------------------------------------------------------

class CliError(MiniflowError):
    pass


class AlreadyRunning(CliError):
    pass


class NotRunning(CliError):
    pass


class MachinesRequireCoordinator(CliError):
    pass


class TemplateExists(CliError):
    pass


class BuildFailed(CliError):
    def __init__(self, node_id: str, detail: str):
        super().__init__(f"build failed for node {node_id!r}: {detail}")
        self.node_id = node_id
        self.detail = detail
