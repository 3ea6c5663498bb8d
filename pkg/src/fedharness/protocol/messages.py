"""Wire format of the parameter-server protocol.

A frame is ``u32 payload_length`` followed by the payload. Every payload
starts with ``u8 type`` and ``u32 round``; the remaining fields depend on
the type (integers big-endian, reals binary64 big-endian, ``params`` in the
encoding of :func:`fedharness.params.serialize`)::

    JOIN      u32 client_id
    JOIN_ACK  u32 client_id
    FIT_INS   params, u32 local_epochs, u32 batch_size, f64 learning_rate, u64 shuffle_seed
    FIT_RES   u32 client_id, u32 num_examples, f64 train_loss, params
    EVAL_INS  params
    EVAL_RES  u32 client_id, u32 num_examples, f64 loss, u16 C, C*C x u64 confusion (row-major)
    DONE      (empty)
    ERROR     u32 n, n bytes UTF-8 text
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..model import TrainConfig
from ..params import ParamError, ParamVector, deserialize_from, serialize

FRAME_HEADER = struct.Struct(">I")
MAX_FRAME = 1 << 30

_HEAD = struct.Struct(">BI")
_U32 = struct.Struct(">I")
_FIT_CFG = struct.Struct(">IIdQ")
_RES_HEAD = struct.Struct(">IId")
_U16 = struct.Struct(">H")


class ProtocolError(Exception):
    pass


class MessageType(enum.IntEnum):
    JOIN = 1
    JOIN_ACK = 2
    FIT_INS = 3
    FIT_RES = 4
    EVAL_INS = 5
    EVAL_RES = 6
    DONE = 7
    ERROR = 8


@dataclass(eq=False)
class Message:
    type: MessageType
    round: int = 0
    client_id: int = 0
    params: Optional[ParamVector] = None
    train: Optional[TrainConfig] = None
    num_examples: int = 0
    loss: float = 0.0
    confusion: Optional[np.ndarray] = None
    text: str = ""

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Message):
            return NotImplemented
        return encode(self) == encode(other)

    def __repr__(self) -> str:
        return f"Message({self.type.name}, round={self.round}, client={self.client_id})"


def join(client_id: int) -> Message:
    return Message(MessageType.JOIN, 0, client_id=client_id)


def done(rnd: int = 0) -> Message:
    return Message(MessageType.DONE, rnd)


def error(text: str, rnd: int = 0) -> Message:
    return Message(MessageType.ERROR, rnd, text=text)


def encode(msg: Message) -> bytes:
    t = MessageType(msg.type)
    parts = [_HEAD.pack(int(t), msg.round)]
    if t in (MessageType.JOIN, MessageType.JOIN_ACK):
        parts.append(_U32.pack(msg.client_id))
    elif t == MessageType.FIT_INS:
        cfg = msg.train
        parts += [serialize(msg.params),
                  _FIT_CFG.pack(cfg.local_epochs, cfg.batch_size, cfg.learning_rate, cfg.shuffle_seed)]
    elif t == MessageType.FIT_RES:
        parts += [_RES_HEAD.pack(msg.client_id, msg.num_examples, msg.loss), serialize(msg.params)]
    elif t == MessageType.EVAL_INS:
        parts.append(serialize(msg.params))
    elif t == MessageType.EVAL_RES:
        cm = np.asarray(msg.confusion, dtype=np.uint64)
        if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
            raise ProtocolError("confusion matrix must be square")
        parts += [_RES_HEAD.pack(msg.client_id, msg.num_examples, msg.loss), _U16.pack(cm.shape[0]),
                  cm.astype(">u8").tobytes()]
    elif t == MessageType.ERROR:
        text = msg.text.encode("utf-8")
        parts += [_U32.pack(len(text)), text]
    return b"".join(parts)


def decode(payload: bytes) -> Message:
    view = memoryview(payload)
    try:
        tag, rnd = _HEAD.unpack_from(view, 0)
        try:
            t = MessageType(tag)
        except ValueError:
            raise ProtocolError(f"unknown message type {tag}") from None
        off = _HEAD.size
        msg = Message(t, rnd)
        if t in (MessageType.JOIN, MessageType.JOIN_ACK):
            (msg.client_id,) = _U32.unpack_from(view, off)
            off += _U32.size
        elif t == MessageType.FIT_INS:
            msg.params, off = deserialize_from(view, off)
            epochs, batch, lr, seed = _FIT_CFG.unpack_from(view, off)
            off += _FIT_CFG.size
            msg.train = TrainConfig(epochs, batch, lr, seed)
        elif t == MessageType.FIT_RES:
            msg.client_id, msg.num_examples, msg.loss = _RES_HEAD.unpack_from(view, off)
            off += _RES_HEAD.size
            msg.params, off = deserialize_from(view, off)
        elif t == MessageType.EVAL_INS:
            msg.params, off = deserialize_from(view, off)
        elif t == MessageType.EVAL_RES:
            msg.client_id, msg.num_examples, msg.loss = _RES_HEAD.unpack_from(view, off)
            off += _RES_HEAD.size
            (c,) = _U16.unpack_from(view, off)
            off += _U16.size
            end = off + 8 * c * c
            if end > len(view):
                raise ProtocolError("truncated confusion matrix")
            msg.confusion = np.frombuffer(view[off:end], dtype=">u8").astype(np.int64).reshape(c, c)
            off = end
        elif t == MessageType.ERROR:
            (n,) = _U32.unpack_from(view, off)
            off += _U32.size
            if off + n > len(view):
                raise ProtocolError("truncated error text")
            msg.text = bytes(view[off : off + n]).decode("utf-8")
            off += n
    except (struct.error, ParamError, UnicodeDecodeError, ValueError) as exc:
        raise ProtocolError(f"malformed payload: {exc}") from None
    if off != len(view):
        raise ProtocolError(f"{len(view) - off} trailing bytes in {t.name} payload")
    return msg


def frame(msg: Message) -> bytes:
    payload = encode(msg)
    return FRAME_HEADER.pack(len(payload)) + payload


def unframe(data: bytes) -> tuple[Message, int]:
    """Decode the first frame in ``data``; return it and the bytes consumed."""
    if len(data) < FRAME_HEADER.size:
        raise ProtocolError("truncated frame header")
    (n,) = FRAME_HEADER.unpack_from(data, 0)
    if n > MAX_FRAME:
        raise ProtocolError(f"frame of {n} bytes exceeds limit")
    end = FRAME_HEADER.size + n
    if len(data) < end:
        raise ProtocolError("truncated frame payload")
    return decode(bytes(data[FRAME_HEADER.size : end])), end
