from .backends import Backend, BackendRequest, OracleBackend, OracleFixture, RemoteBackend
from .cache import CACHE_DIR_ENV, CacheKey, DiskCache, MemoryCache
from .gateway import LLMGateway
from .parsing import parse_count, parse_verdict
from .prompts import PROMPT_SUFFIX, build_prompt, facility_profile
from .queries import ConnectionQuery, CountQuery, ModelAnswer, OmissionQuery, SameRoomQuery

__all__ = [
    "Backend", "BackendRequest", "OracleBackend", "OracleFixture", "RemoteBackend",
    "CACHE_DIR_ENV", "CacheKey", "DiskCache", "MemoryCache", "LLMGateway",
    "parse_count", "parse_verdict", "PROMPT_SUFFIX", "build_prompt", "facility_profile",
    "ConnectionQuery", "CountQuery", "ModelAnswer", "OmissionQuery", "SameRoomQuery",
]
