"""Python front end for the commshim library.

Ping-pong sweeps, the transpose-sum and key-merge cluster benchmarks and
their oracles, plus the wire and CSV helpers, all backed by the C++ core.
"""

from ._commshim import (
    CLI_MAX_CHUNK,
    CSV_HEADER,
    BenchRecord,
    Error,
    chunk_plan,
    decode_message_header,
    default_sizes,
    encode_frame_header,
    encode_message_header,
    key_merge,
    key_merge_oracle,
    parse_csv,
    parse_sizes,
    pingpong,
    to_csv,
    to_table,
    transpose_oracle,
    transpose_sum,
)

__all__ = [
    "CLI_MAX_CHUNK",
    "CSV_HEADER",
    "BenchRecord",
    "Error",
    "chunk_plan",
    "decode_message_header",
    "default_sizes",
    "encode_frame_header",
    "encode_message_header",
    "key_merge",
    "key_merge_oracle",
    "parse_csv",
    "parse_sizes",
    "pingpong",
    "to_csv",
    "to_table",
    "transpose_oracle",
    "transpose_sum",
]
