"""Print annotated hex dumps of sample frames (the worked examples in PROTOCOL.md)."""

import struct

import numpy as np

from fedvisor.compression import CompressedUpdate
from fedvisor.detection import ModelParams
from fedvisor.explorer import ClientResourceReport
from fedvisor.protocol import (
    HEADER,
    DispatchModel,
    Error,
    JoinTask,
    ResourceReport,
    StartLocalTraining,
    UploadUpdate,
    decode_message,
    encode_message,
)

TINY = ModelParams([(np.array([[0.5]]), np.array([-1.0])), (np.array([[2.0]]), np.array([0.25]))])

EXAMPLES = [
    ("JoinTask", JoinTask("t1", "c0", n_samples=3)),
    ("StartLocalTraining", StartLocalTraining("t1", "server", round=2)),
    ("Error", Error("t1", "server", code=500, text="no")),
    ("ResourceReport", ResourceReport("t1", "c0", ClientResourceReport("c0", 0.25, 0.5, 10.0, -1.0))),
    ("DispatchModel (1x1 -> 1x1 model)", DispatchModel("t1", "server", round=1, params=TINY)),
    (
        "UploadUpdate (layer 1 only)",
        UploadUpdate("t1", "c0", 1, CompressedUpdate("c0", 1, {1: TINY.layers[1]}, [0.0, 1.5], 3, 0.5), {}),
    ),
]


def hexdump(data: bytes) -> str:
    return "\n".join(
        f"{off:04x}  " + " ".join(f"{b:02x}" for b in data[off : off + 16]) for off in range(0, len(data), 16)
    )


def fields(frame: bytes):
    payload = frame[HEADER.size :]
    pos = 2
    while pos < len(payload):
        tag, n = struct.unpack_from("<BI", payload, pos)
        yield tag, payload[pos + 5 : pos + 5 + n]
        pos += 5 + n


if __name__ == "__main__":
    for title, msg in EXAMPLES:
        frame = encode_message(msg)
        assert decode_message(frame) == msg
        print(f"### {title}\n")
        print("```")
        print(hexdump(frame))
        print("```\n")
        print(f"- header: magic `46 44 56 31`, payload length {len(frame) - HEADER.size}")
        print(f"- version {frame[8]}, variant tag {frame[9]}")
        for tag, value in fields(frame):
            print(f"- field {tag} ({len(value)} bytes): `{value.hex(' ')}`")
        print()
