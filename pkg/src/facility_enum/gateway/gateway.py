from __future__ import annotations

import json
import logging
import threading
from typing import Mapping

from ..core import DoorBox, Plan
from ..errors import ParseError
from ..overlay import OverlaySpec, render_overlay
from .backends import Backend, BackendRequest
from .cache import CacheKey, MemoryCache
from .parsing import extract_reason, parse_count, parse_verdict
from .prompts import DEFAULT_TEMPLATE_VERSION, build_prompt, facility_profile, load_templates, reprompt_text
from .queries import ModelAnswer, Query

logger = logging.getLogger(__name__)

NO_OVERLAY = "none"


class LLMGateway:
    """Ask one question about one plan, with caching and a single reprompt.

    The cache key identifies the shown image by the plan digest plus the
    overlay spec digest; the rendered overlay is a pure function of those
    two, so the raster is only drawn when a backend actually needs it.
    """

    def __init__(self, backend: Backend, cache=None, template_version: str = DEFAULT_TEMPLATE_VERSION,
                 profiles: Mapping[str, str] | None = None):
        load_templates(template_version)
        self.backend = backend
        self.cache = cache if cache is not None else MemoryCache()
        self.template_version = template_version
        self.profiles = dict(profiles or {})
        self._key_locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self.hits = 0
        self.misses = 0

    def profile_for(self, facility) -> str:
        if facility is None:
            return ""
        key = str(facility)
        return self.profiles.get(key) or facility_profile(facility, self.template_version)

    def cache_key(self, query: Query, plan: Plan, overlay: OverlaySpec | None) -> CacheKey:
        return CacheKey(
            image_bytes_digest=plan.ref.image_bytes_digest,
            overlay_digest=overlay.digest() if overlay is not None else NO_OVERLAY,
            query=json.dumps(query.canonical(), sort_keys=True, separators=(",", ":")),
            prompt_template_version=self.template_version,
            backend_name=self.backend.name,
        )

    def _lock_for(self, digest: str) -> threading.Lock:
        with self._locks_guard:
            return self._key_locks.setdefault(digest, threading.Lock())

    def ask(self, query: Query, plan: Plan, overlay: OverlaySpec | None = None,
            boxes: Mapping[int, DoorBox] | None = None) -> tuple[ModelAnswer, CacheKey]:
        key = self.cache_key(query, plan, overlay)
        with self._lock_for(key.digest):
            cached = self.cache.get(key)
            if cached is not None:
                self.hits += 1
                return cached, key
            self.misses += 1
            answer, prompt = self._query_backend(query, plan, overlay, boxes)
            self.cache.put(key, answer, {"plan_id": plan.plan_id, "prompt": prompt, "backend": self.backend.name})
            return answer, key

    def _query_backend(self, query, plan, overlay, boxes):
        prompt = build_prompt(query, self.profile_for(getattr(query, "facility", None)), boxes, self.template_version)
        image = None
        if self.backend.needs_image:
            image = render_overlay(plan.image, overlay)[0] if overlay is not None else plan.image
        parse = parse_verdict if query.expects == "verdict" else parse_count
        raw = self.backend.complete(BackendRequest(plan.plan_id, query, prompt, image))
        try:
            value = parse(raw)
        except ParseError:
            logger.info("unparseable reply for %s on %s, reprompting", query.canonical(), plan.plan_id)
            prompt = f"{prompt}\n{reprompt_text(query.expects, self.template_version)}"
            raw = self.backend.complete(BackendRequest(plan.plan_id, query, prompt, image))
            try:
                value = parse(raw)
            except ParseError as exc:
                raise ParseError(f"unparseable reply after reprompt: {exc}", raw) from exc
        return ModelAnswer(value, raw, extract_reason(raw)), prompt
