# Licensed under a 3-clause BSD style license - see LICENSE.rst
# -*- coding: utf-8 -*-
"""
advText.victim
==============

Decision-only access to victim classifiers.

A :class:`VictimClient` wraps an adapter and enforces the query budget of
one attack session.  Adapters return a bare integer label; nothing else a
victim might expose ever reaches the caller.

The remote protocol is one HTTP POST per query with the JSON body
``{"text_a": ..., "text_b": ...}`` (``text_b`` omitted for single texts) and
the JSON response ``{"label": <int>}``.
"""
import os
import json
import time
from collections import namedtuple
from urllib.error import URLError
from urllib.request import Request, urlopen

from desiutil.log import get_logger

from .core import Decision, BadDecision, BudgetExhausted, RemoteUnavailable, InvalidConfig
from .util import render, utcnow


#: Environment variable overriding the URL of a remote victim.
VICTIM_URL_ENV = 'ADV_TEXT_VICTIM_URL'

QueryRecord = namedtuple('QueryRecord', ['text', 'decision', 'timestamp'])
QueryRecord.__doc__ = """One entry of a query log: rendered text, :class:`~advText.core.Decision` and UTC time."""


class InProcessAdapter:
    """Victim backed by a local model handle.

    Parameters
    ----------
    model : :class:`~advText.model.LocalModelHandle`
        Model whose task head makes the decision.
    """

    def __init__(self, model):
        self.model = model
        self.name = f"inproc:{model.name}"

    def decide(self, text_a, text_b=None):
        return self.model.predict(text_a, text_b)


class HttpAdapter:
    """Victim behind an HTTP endpoint.

    Parameters
    ----------
    url : :class:`str`
        Endpoint receiving the POST requests.
    timeout : :class:`float`, optional
        Seconds per request.
    attempts : :class:`int`, optional
        Attempts before giving up.
    backoff : :class:`float`, optional
        Delay after the first failed attempt; doubled after each further one.
    """

    def __init__(self, url, timeout=10.0, attempts=3, backoff=0.5):
        self.url = url
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff
        self.name = f"http:{url}"

    def _post(self, payload):
        request = Request(self.url, data=json.dumps(payload).encode('utf-8'),
                          headers={'Content-Type': 'application/json'}, method='POST')
        with urlopen(request, timeout=self.timeout) as response:
            data = json.loads(response.read().decode('utf-8'))
        return data['label']

    def decide(self, text_a, text_b=None):
        log = get_logger()
        payload = {'text_a': text_a}
        if text_b is not None:
            payload['text_b'] = text_b
        for attempt in range(self.attempts):
            try:
                return self._post(payload)
            except (URLError, OSError, ValueError, KeyError, TypeError) as e:
                log.warning("Attempt %d/%d to query %s failed: %s", attempt + 1, self.attempts, self.url, e)
                if attempt + 1 < self.attempts:
                    time.sleep(self.backoff * 2**attempt)
        raise RemoteUnavailable(f"No response from {self.url} after {self.attempts:d} attempts.")


class VictimClient:
    """Budgeted, decision-only victim for one attack session.

    Parameters
    ----------
    adapter : :class:`InProcessAdapter` or :class:`HttpAdapter`
        Object with a ``decide(text_a, text_b)`` method returning a label.
    budget : :class:`int`
        Maximum number of queries.
    num_classes : :class:`int`, optional
        If set, labels outside ``[0, num_classes)`` are rejected.
    """

    def __init__(self, adapter, budget, num_classes=None):
        self.adapter = adapter
        self.budget = budget
        self.num_classes = num_classes
        self._queries_made = 0
        self._log = []

    @property
    def name(self):
        return self.adapter.name

    @property
    def queries_made(self):
        return self._queries_made

    @property
    def exhausted(self):
        return self._queries_made >= self.budget

    def classify(self, text_a, text_b=None):
        """Query the victim once.

        Parameters
        ----------
        text_a : :class:`str`
            Text, or first text of a pair.
        text_b : :class:`str`, optional
            Second text of a pair.

        Returns
        -------
        :class:`~advText.core.Decision`
            The predicted label.

        Raises
        ------
        :exc:`~advText.core.BudgetExhausted`
            If the budget is already used up.
        :exc:`~advText.core.RemoteUnavailable`
            If a remote victim does not answer; the budget is not charged.
        :exc:`~advText.core.BadDecision`
            If the answer is not an integer label in range; not charged either.
        """
        if self.exhausted:
            raise BudgetExhausted(f"Query budget of {self.budget:d} exhausted.")
        label = self.adapter.decide(text_a, text_b)
        try:
            decision = Decision(label)
            if self.num_classes is not None:
                decision.check(self.num_classes)
        except (TypeError, ValueError) as e:
            raise BadDecision(f"{self.name} answered {label!r}: {e}") from None
        self._queries_made += 1
        self._log.append(QueryRecord(render(text_a, text_b), decision, utcnow()))
        return decision

    def query_log(self):
        """Copy of all queries in call order.

        Returns
        -------
        :class:`list`
            :class:`QueryRecord` tuples.
        """
        return list(self._log)


def get_adapter(victim, timeout=10.0, model=None, mlm_model=None):
    """Build a victim adapter from its command-line description.

    Parameters
    ----------
    victim : :class:`str`
        ``inproc:NAME`` where NAME is a local model name, or ``http:URL``.
        For remote victims :envvar:`ADV_TEXT_VICTIM_URL` overrides URL.
    timeout : :class:`float`, optional
        Seconds per HTTP request.
    model : :class:`~advText.model.LocalModelHandle`, optional
        Already-loaded model to reuse when NAME matches it.
    mlm_model : :class:`str`, optional
        MLM checkpoint for an ``hf:`` model loaded here, see
        :func:`~advText.model.get_local_model`.

    Returns
    -------
    :class:`InProcessAdapter` or :class:`HttpAdapter`
        The adapter.
    """
    from .model import get_local_model
    log = get_logger()
    kind, _, rest = victim.partition(':')
    if kind == 'inproc' and rest:
        if model is not None and rest == getattr(model, 'source', None):
            return InProcessAdapter(model)
        return InProcessAdapter(get_local_model(rest, mlm_model=mlm_model))
    if kind in ('http', 'https') and rest:
        url = victim if rest.startswith('//') else rest
        if os.environ.get(VICTIM_URL_ENV):
            url = os.environ[VICTIM_URL_ENV]
            log.info("Victim URL overridden by %s: %s.", VICTIM_URL_ENV, url)
        return HttpAdapter(url, timeout=timeout)
    raise InvalidConfig('victim', f"Cannot interpret victim '{victim}'.")
