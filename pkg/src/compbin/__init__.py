"""Compact binary CSR graphs (CompBin), a concurrent block cache, and loaders."""
from .cache import CacheConfig, CachedFile, WaitPolicy, register, unregister
from .convert import EdgeListSource, convert, stats, verify
from .core import (
    CompBinGraph,
    GraphHeader,
    bytes_per_id,
    decode_neighbor,
    degree,
    encode_neighbor,
    from_edges,
    open_compbin,
    predicted_size,
    write_compbin,
)
from .loader import LoadMode, LoadRequest, LoadState, LoadTicket, load_range, load_whole, wait

__all__ = [
    "CacheConfig", "CachedFile", "WaitPolicy", "register", "unregister",
    "EdgeListSource", "convert", "stats", "verify",
    "CompBinGraph", "GraphHeader", "bytes_per_id", "decode_neighbor", "degree",
    "encode_neighbor", "from_edges", "open_compbin", "predicted_size", "write_compbin",
    "LoadMode", "LoadRequest", "LoadState", "LoadTicket", "load_range", "load_whole", "wait",
]
