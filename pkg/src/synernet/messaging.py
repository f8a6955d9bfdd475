"""Typed message bus between the four agents.

Delivery is synchronous: ``post`` enqueues per receiver (FIFO) and appends to
the trace, ``drain`` hands back and clears a receiver's queue.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Union

from .encoders import Embedding


class AgentId(str, Enum):
    VISUAL = "V"
    LINGUISTIC = "L"
    NOMINAL = "N"
    COORDINATOR = "C"


class RoutingError(KeyError):
    pass


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class Features:
    embeddings: tuple[Embedding, ...]

    def __post_init__(self):
        object.__setattr__(self, "embeddings", tuple(self.embeddings))


@dataclass(frozen=True)
class Strategy:
    tag: str
    difficulty: float


@dataclass(frozen=True)
class Context:
    embedding: Embedding


@dataclass(frozen=True)
class Metadata:
    entries: tuple[tuple[str, str], ...]

    def __post_init__(self):
        items = self.entries.items() if isinstance(self.entries, dict) else self.entries
        object.__setattr__(self, "entries", tuple((str(k), str(v)) for k, v in items))

    def as_dict(self) -> dict[str, str]:
        return dict(self.entries)


Payload = Union[Features, Strategy, Context, Metadata]


@dataclass(frozen=True)
class Message:
    sender: AgentId
    receiver: AgentId
    payload: Payload
    step_index: int

    def __post_init__(self):
        object.__setattr__(self, "sender", AgentId(self.sender))
        object.__setattr__(self, "receiver", AgentId(self.receiver))
        if self.sender == self.receiver:
            raise ValueError("sender and receiver must differ")
        if not isinstance(self.payload, (Features, Strategy, Context, Metadata)):
            raise TypeError(f"unsupported payload type {type(self.payload).__name__}")

    @property
    def edge(self) -> str:
        return f"{self.sender.value}->{self.receiver.value}"

    def to_json(self) -> dict:
        p = self.payload
        if isinstance(p, Features):
            body = {"kind": "FEATURES", "embeddings": [e.to_json() for e in p.embeddings]}
        elif isinstance(p, Strategy):
            body = {"kind": "STRATEGY", "tag": p.tag, "difficulty": p.difficulty}
        elif isinstance(p, Context):
            body = {"kind": "CONTEXT", "embedding": p.embedding.to_json()}
        else:
            body = {"kind": "METADATA", "entries": [list(e) for e in p.entries]}
        return {"sender": self.sender.value, "receiver": self.receiver.value, "step_index": self.step_index, "payload": body}

    @classmethod
    def from_json(cls, d: dict) -> "Message":
        body = d["payload"]
        kind = body["kind"]
        if kind == "FEATURES":
            payload: Payload = Features(tuple(Embedding.from_json(e) for e in body["embeddings"]))
        elif kind == "STRATEGY":
            payload = Strategy(body["tag"], body["difficulty"])
        elif kind == "CONTEXT":
            payload = Context(Embedding.from_json(body["embedding"]))
        elif kind == "METADATA":
            payload = Metadata(tuple((k, v) for k, v in body["entries"]))
        else:
            raise ValueError(f"unknown payload kind {kind!r}")
        return cls(AgentId(d["sender"]), AgentId(d["receiver"]), payload, int(d["step_index"]))


class MessageBus:
    def __init__(self, agents: Iterable[AgentId] = ()):
        self._queues: dict[AgentId, deque[Message]] = {}
        self.trace: list[Message] = []
        for a in agents:
            self.register(a)

    def register(self, agent: AgentId) -> None:
        self._queues.setdefault(AgentId(agent), deque())

    @property
    def registered(self) -> set[AgentId]:
        return set(self._queues)

    def post(self, msg: Message) -> None:
        if msg.receiver not in self._queues:
            raise RoutingError(f"no agent registered as {msg.receiver.value!r}")
        if self.trace and msg.step_index < self.trace[-1].step_index:
            raise ProtocolError("step_index must be non-decreasing along the trace")
        self._queues[msg.receiver].append(msg)
        self.trace.append(msg)

    def drain(self, receiver: AgentId) -> list[Message]:
        receiver = AgentId(receiver)
        if receiver not in self._queues:
            raise RoutingError(f"no agent registered as {receiver.value!r}")
        q = self._queues[receiver]
        out = list(q)
        q.clear()
        return out

    def pending(self) -> int:
        return sum(len(q) for q in self._queues.values())


def post_message(bus: MessageBus, msg: Message) -> None:
    bus.post(msg)


def drain(bus: MessageBus, receiver: AgentId) -> list[Message]:
    return bus.drain(receiver)


def write_trace(messages: Iterable[Message], path: str | Path) -> None:
    with open(path, "w") as fh:
        for m in messages:
            fh.write(json.dumps(m.to_json()))
            fh.write("\n")


def read_trace(path: str | Path) -> list[Message]:
    with open(path) as fh:
        return [Message.from_json(json.loads(line)) for line in fh if line.strip()]
