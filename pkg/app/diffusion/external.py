import json
import logging
import os
import selectors
import shlex
import struct
import subprocess
import time
from typing import Any, Self

import numpy as np

from app.core.config import common_settings
from app.core.exceptions import BackendError, DenoiserTimeoutError, ProtocolError, ShapeMismatchError
from app.entity.latent import AttentionStack, DenoiserOutput, FloatArray, LatentGrid
from app.interface.denoiser import BaseDenoiser

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
HEADER = struct.Struct(">I")


def encode_message(message: dict[str, Any]) -> bytes:
    """Frame a JSON object: 4-byte big-endian length prefix followed by UTF-8 JSON."""
    payload = json.dumps(message, separators=(",", ":")).encode("utf-8")
    return HEADER.pack(len(payload)) + payload


def decode_message(buffer: bytes, offset: int = 0) -> tuple[dict[str, Any], int]:
    """
    Decode one framed message from `buffer` starting at `offset`.

    Raises:
        ProtocolError: If the frame is truncated or the payload is not a UTF-8 JSON object.

    Returns:
        tuple[dict[str, Any], int]: The message and the offset just past it.
    """
    if len(buffer) - offset < HEADER.size:
        raise ProtocolError("Truncated length prefix", offset=len(buffer))
    (length,) = HEADER.unpack_from(buffer, offset)
    start = offset + HEADER.size
    if len(buffer) - start < length:
        raise ProtocolError(f"Truncated payload, expected {length} bytes", offset=len(buffer))
    return _parse_payload(buffer[start : start + length], start), start + length


def _parse_payload(payload: bytes, offset: int) -> dict[str, Any]:
    try:
        message = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError("Payload is not UTF-8 JSON", offset=offset) from exc
    if not isinstance(message, dict):
        raise ProtocolError("Payload is not a JSON object", offset=offset)
    return message


class ExternalDenoiser(BaseDenoiser):
    """
    Client of a denoiser running as a child process.

    Requests and responses are framed JSON objects over the child's standard streams. The handle is
    single-owner: one request is in flight at a time.
    """

    def __init__(self, command: str | list[str], shape: tuple[int, int, int], timeout: float = 120.0) -> None:
        """
        Initialize ExternalDenoiser. The process is started by `open()` or on context entry.

        Args:
            command (str | list[str]): Command line of the backend.
            shape (tuple[int, int, int]): Latent shape (C, H, W); attention planes are H x W.
            timeout (float): Seconds to wait for each response.
        """
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.shape = shape
        self.attention_shape = (shape[1], shape[2])
        self.timeout = timeout
        self.process: subprocess.Popen[bytes] | None = None
        self._offset = 0

    def __enter__(self) -> Self:
        """Start the backend and complete the handshake."""
        self.open()
        return self

    def __exit__(self, *_: object) -> None:
        """Stop the backend."""
        self.close()

    def open(self) -> None:
        """
        Start the backend and perform the version handshake. A failed handshake kills the backend.

        Raises:
            BackendError: If the process cannot be started or answers with another version.
            ProtocolError: If the handshake reply is malformed.
            DenoiserTimeoutError: If the backend does not answer the handshake in time.
        """
        try:
            self.process = subprocess.Popen(  # noqa: S603
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
            )
        except OSError as exc:
            msg = f"Cannot start denoiser backend {self.command}"
            raise BackendError(msg) from exc

        try:
            reply = self._request({"op": "hello", "version": PROTOCOL_VERSION})
            if reply.get("version") != PROTOCOL_VERSION:
                msg = f"Backend answered handshake with {reply!r}"
                raise BackendError(msg)
        except BaseException:
            self.close(kill=True)
            raise
        logger.info("External denoiser started: %s", " ".join(self.command))

    def close(self, kill: bool = False) -> None:
        """
        Close the pipes and wait for the backend to exit.

        Args:
            kill (bool): Kill the backend instead of waiting for it, used when it may be stuck mid-request.
        """
        if self.process is None:
            return
        process, self.process = self.process, None
        if kill:
            process.kill()
        if process.stdin:
            try:
                process.stdin.close()
            except OSError:
                logger.debug("Backend input already broken")
        try:
            process.wait(timeout=5)
        except subprocess.TimeoutExpired:
            process.kill()
            process.wait()
        if process.stdout:
            process.stdout.close()

    def _read_exact(self, n: int, deadline: float) -> bytes:
        assert self.process is not None  # noqa: S101
        assert self.process.stdout is not None  # noqa: S101
        fd = self.process.stdout.fileno()
        chunks = bytearray()
        with selectors.DefaultSelector() as selector:
            selector.register(fd, selectors.EVENT_READ)
            while len(chunks) < n:
                remaining = deadline - time.monotonic()
                if remaining <= 0 or not selector.select(remaining):
                    msg = f"No response from denoiser backend within {self.timeout} s"
                    raise DenoiserTimeoutError(msg)
                chunk = os.read(fd, n - len(chunks))
                if not chunk:
                    raise ProtocolError("Backend closed the stream mid-message", offset=self._offset + len(chunks))
                chunks.extend(chunk)
        self._offset += n
        return bytes(chunks)

    def _request(self, message: dict[str, Any]) -> dict[str, Any]:
        if self.process is None or self.process.stdin is None:
            raise BackendError("Denoiser backend is not running")
        try:
            self.process.stdin.write(encode_message(message))
            self.process.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise BackendError("Denoiser backend closed its input") from exc

        deadline = time.monotonic() + self.timeout
        (length,) = HEADER.unpack(self._read_exact(HEADER.size, deadline))
        start = self._offset
        reply = _parse_payload(self._read_exact(length, deadline), start)
        if "error" in reply:
            msg = f"Backend error: {reply['error']}"
            raise BackendError(msg)
        return reply

    def _array(self, values: object, size: int, what: str) -> FloatArray:
        try:
            array = np.asarray(values, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            msg = f"{what} is not a list of numbers"
            raise ProtocolError(msg) from exc
        if array.ndim != 1 or array.size != size:
            msg = f"{what} has {array.size} values, expected {size}"
            raise ProtocolError(msg) from ShapeMismatchError(msg)
        return array

    def _base_request(self, op: str, z: LatentGrid, t: int, tokens: list[int]) -> dict[str, Any]:
        if z.shape != self.shape:
            msg = f"Latent shape {z.shape} != {self.shape}"
            raise ShapeMismatchError(msg)
        return {"op": op, "t": t, "shape": list(self.shape), "z": z.data.ravel().tolist(), "tokens": list(tokens)}

    def denoise(self, z: LatentGrid, t: int, tokens: list[int]) -> DenoiserOutput:
        """
        Send one denoise request and validate the answer.

        Raises:
            ProtocolError: If the answer is malformed or has wrong shapes.
            BackendError: If the backend reports a failure.
            DenoiserTimeoutError: If the backend does not answer in time.

        Returns:
            DenoiserOutput: Noise prediction and attention logits.
        """
        reply = self._request(self._base_request("denoise", z, t, tokens))
        size = int(np.prod(self.shape))
        cells = self.attention_shape[0] * self.attention_shape[1]
        eps = self._array(reply.get("eps"), size, "eps").reshape(self.shape)

        raw_attention = reply.get("attention")
        if not isinstance(raw_attention, dict):
            raise ProtocolError("Response has no attention object")
        maps: dict[int, FloatArray] = {}
        for k in tokens:
            if str(k) not in raw_attention:
                msg = f"Response misses attention for token {k}"
                raise ProtocolError(msg)
            maps[k] = self._array(raw_attention[str(k)], cells, f"attention[{k}]").reshape(self.attention_shape)

        if common_settings.debug:
            logger.debug("Backend answered t=%d for tokens %s", t, tokens)
        return DenoiserOutput(eps=eps, attention=AttentionStack(maps))

    def attention_vjp(self, z: LatentGrid, t: int, tokens: list[int], grad: dict[int, FloatArray]) -> FloatArray:
        """Ask the backend for the attention vector-Jacobian product."""
        request = self._base_request("vjp", z, t, tokens)
        request["grad"] = {str(k): g.ravel().tolist() for k, g in grad.items()}
        reply = self._request(request)
        return self._array(reply.get("grad_z"), int(np.prod(self.shape)), "grad_z").reshape(self.shape)
