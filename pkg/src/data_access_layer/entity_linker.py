""" Word → entity linking. The offline gazetteer is the default; a remote linker can be plugged in. """
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import requests

logger = logging.getLogger(__name__)

DEFAULT_TIMEOUT_S = 10.0


@dataclass
class Gazetteer:
    """At most one entity per word. Lookups of unknown words return None."""
    mapping: Dict[str, str] = field(default_factory=dict)

    def lookup(self, word: str) -> Optional[str]:
        return self.mapping.get(word)

    def __len__(self) -> int:
        return len(self.mapping)


class RemoteEntityLinker:
    """
    Entity linker backed by an HTTP search endpoint.

    The endpoint is called as ``GET <base_url>?q=<word>`` and must answer with JSON
    ``{"entity": "<name>"}`` or ``{"entity": null}``. Answers are cached per word so a
    build over a corpus issues one request per distinct word. Network failures are logged
    and treated as "no entity".
    """

    def __init__(self, base_url: str, timeout: float = DEFAULT_TIMEOUT_S, session: Optional[requests.Session] = None):
        self.base_url = base_url
        self.timeout = timeout
        self.session = session or requests.Session()
        self._cache: Dict[str, Optional[str]] = {}

    def lookup(self, word: str) -> Optional[str]:
        if word in self._cache:
            return self._cache[word]
        entity = self._query(word)
        self._cache[word] = entity
        return entity

    def _query(self, word: str) -> Optional[str]:
        try:
            resp = self.session.get(self.base_url, params={"q": word}, timeout=self.timeout)
            resp.raise_for_status()
            entity = resp.json().get("entity")
        except (requests.RequestException, ValueError) as e:
            logger.warning("entity lookup for %r failed: %s", word, e)
            return None
        return str(entity) if entity else None

    def to_gazetteer(self, words) -> Gazetteer:
        """Freeze lookups for ``words`` into an offline gazetteer (for reproducible reruns)."""
        mapping = {}
        for word in words:
            entity = self.lookup(word)
            if entity is not None:
                mapping[word] = entity
        return Gazetteer(mapping)
