"""
Ordered, reliable frame transports between robot and edge

Both ends exchange complete encoded frames. The loopback pair runs inside one
event loop; the TCP transport frames a byte stream with the protocol header.
"""
import asyncio
from typing import List, Optional, Sequence, Tuple

from edgebot.core.config import settings
from edgebot.core.errors import ProtocolError, TransportError
from edgebot.core.logging import component_logger
from edgebot.services.protocol import read_frame_bytes

logger = component_logger("link")


class Transport:
    """Frame endpoint with an inbox queue filled by the peer or a reader task"""

    def __init__(self, name: str = "transport"):
        self.name = name
        self.inbox: asyncio.Queue = asyncio.Queue()
        self.closed = False
        self.eof = False
        self.bytes_sent = 0
        self.frames_sent = 0

    async def send_frame(self, data: bytes) -> None:
        raise NotImplementedError

    async def recv_frame(self) -> Optional[bytes]:
        """Next frame from the peer, or None once the peer has closed"""
        if self.eof:
            return None
        data = await self.inbox.get()
        if data is None:
            self.eof = True
        return data

    def recv_frame_nowait(self) -> Optional[bytes]:
        """A pending frame if one has arrived, else None"""
        if self.eof:
            return None
        try:
            data = self.inbox.get_nowait()
        except asyncio.QueueEmpty:
            return None
        if data is None:
            self.eof = True
        return data

    def can_send(self, now_us: int) -> bool:
        return not self.closed

    async def close(self) -> None:
        self.closed = True


class LoopbackTransport(Transport):
    """In-process endpoint; `pair()` returns two connected ends"""

    def __init__(self, name: str = "loopback"):
        super().__init__(name)
        self.peer: Optional["LoopbackTransport"] = None

    @classmethod
    def pair(cls) -> Tuple["LoopbackTransport", "LoopbackTransport"]:
        a, b = cls("robot"), cls("edge")
        a.peer, b.peer = b, a
        return a, b

    async def send_frame(self, data: bytes) -> None:
        if self.closed or self.peer is None:
            raise TransportError(f"{self.name}: send on closed loopback")
        self.peer.inbox.put_nowait(bytes(data))
        self.bytes_sent += len(data)
        self.frames_sent += 1

    async def close(self) -> None:
        if not self.closed and self.peer is not None:
            self.peer.inbox.put_nowait(None)
        await super().close()


class StallingTransport(Transport):
    """
    Wraps another transport and refuses sends inside simulated-time windows,
    modelling a congested link
    """

    def __init__(self, inner: Transport, windows: Sequence[Tuple[int, int]]):
        super().__init__(f"stalling-{inner.name}")
        self.inner = inner
        self.inbox = inner.inbox
        self.windows: List[Tuple[int, int]] = sorted((int(a), int(b)) for a, b in windows)

    def can_send(self, now_us: int) -> bool:
        if any(start <= now_us < end for start, end in self.windows):
            return False
        return self.inner.can_send(now_us)

    async def send_frame(self, data: bytes) -> None:
        await self.inner.send_frame(data)
        self.bytes_sent += len(data)
        self.frames_sent += 1

    async def recv_frame(self) -> Optional[bytes]:
        return await self.inner.recv_frame()

    def recv_frame_nowait(self) -> Optional[bytes]:
        return self.inner.recv_frame_nowait()

    async def close(self) -> None:
        await self.inner.close()
        await super().close()


class TcpTransport(Transport):
    """Frames over an asyncio TCP stream; a reader task fills the inbox"""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter, name: str = "tcp"):
        super().__init__(name)
        self.reader = reader
        self.writer = writer
        self.reader_task = asyncio.create_task(self._reader_loop())

    @classmethod
    async def connect(cls, host: str, port: int, timeout_s: Optional[float] = None) -> "TcpTransport":
        """
        Connect to a listening edge, retrying until the timeout expires

        Raises:
            TransportError: if no connection could be made in time
        """
        timeout_s = settings.connect_timeout_s if timeout_s is None else timeout_s
        loop = asyncio.get_running_loop()
        deadline = loop.time() + timeout_s
        delay = 0.1
        while True:
            try:
                reader, writer = await asyncio.open_connection(host, port)
                logger.info(f"Connected to edge at {host}:{port}")
                return cls(reader, writer, name=f"tcp-{host}:{port}")
            except OSError as e:
                if loop.time() + delay > deadline:
                    raise TransportError(f"could not connect to {host}:{port}: {e}") from e
                await asyncio.sleep(delay)
                delay = min(delay * 2, 1.0)

    async def _reader_loop(self):
        try:
            while True:
                data = await read_frame_bytes(self.reader)
                if data is None:
                    break
                await self.inbox.put(data)
        except ProtocolError as e:
            logger.warning(f"{self.name}: stream ended mid-frame: {e}")
        except (ConnectionError, OSError) as e:
            logger.warning(f"{self.name}: connection lost: {e}")
        except asyncio.CancelledError:
            raise
        finally:
            await self.inbox.put(None)

    async def send_frame(self, data: bytes) -> None:
        if self.closed:
            raise TransportError(f"{self.name}: send on closed socket")
        try:
            self.writer.write(data)
            await self.writer.drain()
        except (ConnectionError, OSError) as e:
            raise TransportError(f"{self.name}: send failed: {e}") from e
        self.bytes_sent += len(data)
        self.frames_sent += 1

    def can_send(self, now_us: int) -> bool:
        return not self.closed and not self.writer.is_closing()

    async def close(self) -> None:
        if self.closed:
            return
        await super().close()
        try:
            if self.writer.can_write_eof():
                self.writer.write_eof()
            await self.writer.drain()
        except (ConnectionError, OSError):
            pass

    async def shutdown(self) -> None:
        """Close the socket and stop the reader task"""
        await self.close()
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except (ConnectionError, OSError):
            pass
        self.reader_task.cancel()
        try:
            await self.reader_task
        except asyncio.CancelledError:
            pass


async def listen(host: str, port: int) -> Tuple[asyncio.AbstractServer, asyncio.Future]:
    """
    Start listening for a single robot connection

    Returns:
        The server and a future resolving to the connected TcpTransport
    """
    connected: asyncio.Future = asyncio.get_running_loop().create_future()

    async def on_connect(reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        if connected.done():
            writer.close()
            return
        peer = writer.get_extra_info("peername")
        logger.info(f"Robot connected from {peer}")
        connected.set_result(TcpTransport(reader, writer, name=f"tcp-{peer}"))

    server = await asyncio.start_server(on_connect, host, port)
    bound = server.sockets[0].getsockname()
    logger.info(f"Edge listening on {bound[0]}:{bound[1]}")
    return server, connected


def bound_port(server: asyncio.AbstractServer) -> int:
    return int(server.sockets[0].getsockname()[1])


async def accept_one(host: str, port: int) -> TcpTransport:
    """Listen, wait for one robot, then stop accepting new clients"""
    server, connected = await listen(host, port)
    transport = await connected
    server.close()
    return transport
