import numpy as np
import pytest

from hosl.protocol import ConnectionClosed, Transport, decode, encode


class ScriptedTransport(Transport):
    """Replies with canned messages and keeps whatever the client sent."""

    def __init__(self, replies, fail_after=None):
        super().__init__()
        self.replies = list(replies)
        self.sent = []
        self.fail_after = fail_after

    def _send_frame(self, frame):
        if self.fail_after is not None and len(self.sent) >= self.fail_after:
            raise ConnectionClosed("scripted disconnect")
        self.sent.append(decode(frame))

    def _recv_frame(self):
        if not self.replies:
            raise ConnectionClosed("script exhausted")
        return encode(self.replies.pop(0))

    def close(self):
        pass


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rel_err(a, b, floor=1e-6):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.abs(b), floor)
