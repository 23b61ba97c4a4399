"""Prompt rewriting and safety-condition lookup.

:class:`RuleRewriter` is the default client: it swaps the unsafe concept
token for safe-counterpart tokens and keeps every other token in place.
:class:`SubprocessRewriter` speaks the same interface to an external
process, one JSON object per line on stdin/stdout::

    -> {"op": "rewrite", "prompt": [1, 16, 17], "k": 3}
    <- {"candidates": [[3, 16, 17], [4, 16, 17], [5, 16, 17]]}
    -> {"op": "condition", "prompt": [1, 16, 17]}
    <- {"condition": [2, 3, 4, 5, 6]}

Errors come back as ``{"error": "<ClassName>", "message": "..."}``.
``python -m safepatch.data.rewriter`` serves the rule table over that
protocol.
"""

from __future__ import annotations

import json
import subprocess
import sys
from typing import List, Protocol, Sequence, Tuple

from ..exceptions import InvalidConfigError, InvalidPromptError, SafePatchError
from .concepts import CONCEPTS, parse_pattern
from .vocab import NO_OP, PromptTokens, SafetyCondition


class RewriterClient(Protocol):
    def rewrite(self, prompt: PromptTokens, k: int) -> List[PromptTokens]: ...

    def condition(self, prompt: PromptTokens) -> SafetyCondition: ...


class RuleRewriter:
    """Deterministic token-substitution rewriter.

    Candidate ``i`` uses the ``i``-th safe synonym (cycling), so ``k``
    candidates are always produced. Benign and already-safe prompts pass
    through unchanged with the no-op condition.
    """

    def rewrite(self, prompt: PromptTokens, k: int = 4) -> List[PromptTokens]:
        if k < 1:
            raise InvalidConfigError("k must be >= 1")
        p = parse_pattern(prompt)
        spec = CONCEPTS[p.concept]
        if p.variant != "unsafe":
            return [prompt]
        toks = list(prompt.tokens)
        out = []
        for i in range(k):
            toks[p.concept_pos] = spec.safe_tokens[i % len(spec.safe_tokens)]
            out.append(PromptTokens(tuple(toks)))
        return out

    def condition(self, prompt: PromptTokens) -> SafetyCondition:
        p = parse_pattern(prompt)
        spec = CONCEPTS[p.concept]
        if p.variant == "unsafe" and spec.condition is not None:
            return spec.condition
        return NO_OP


def rewrite_unsafe_prompt(client: RewriterClient, prompt: PromptTokens, k: int = 4
                          ) -> Tuple[List[PromptTokens], SafetyCondition]:
    """Return ``k`` safe candidates and the safety condition for ``prompt``.

    A benign prompt comes back as ``[prompt]`` with the no-op condition.
    """
    cond = client.condition(prompt)
    if cond.is_noop:
        return [prompt], cond
    return client.rewrite(prompt, k), cond


class SubprocessRewriter:
    """Client for an external rewriter process speaking the line protocol."""

    def __init__(self, command: Sequence[str]):
        self.command = list(command)
        self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                      text=True, bufsize=1)

    def _call(self, request: dict) -> dict:
        if self._proc.poll() is not None:
            raise SafePatchError(f"rewriter process exited with code {self._proc.returncode}")
        self._proc.stdin.write(json.dumps(request) + "\n")
        self._proc.stdin.flush()
        line = self._proc.stdout.readline()
        if not line:
            raise SafePatchError("rewriter process closed its output")
        reply = json.loads(line)
        if "error" in reply:
            raise InvalidPromptError(f"{reply['error']}: {reply.get('message', '')}")
        return reply

    def rewrite(self, prompt: PromptTokens, k: int = 4) -> List[PromptTokens]:
        reply = self._call({"op": "rewrite", "prompt": list(prompt.tokens), "k": k})
        return [PromptTokens(tuple(c)) for c in reply["candidates"]]

    def condition(self, prompt: PromptTokens) -> SafetyCondition:
        reply = self._call({"op": "condition", "prompt": list(prompt.tokens)})
        return SafetyCondition(tuple(reply["condition"]))

    def close(self):
        if self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def handle_request(client: RewriterClient, request: dict) -> dict:
    try:
        prompt = PromptTokens(tuple(request["prompt"]))
        op = request.get("op")
        if op == "rewrite":
            cands = client.rewrite(prompt, int(request.get("k", 4)))
            return {"candidates": [list(c.tokens) for c in cands]}
        if op == "condition":
            return {"condition": list(client.condition(prompt).tokens)}
        return {"error": "InvalidConfigError", "message": f"unknown op {op!r}"}
    except (SafePatchError, KeyError, TypeError, ValueError) as exc:
        return {"error": type(exc).__name__, "message": str(exc)}


def serve(stdin=None, stdout=None, client: RewriterClient | None = None) -> None:
    """Answer protocol requests line by line until EOF."""
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    client = client or RuleRewriter()
    for line in stdin:
        line = line.strip()
        if not line:
            continue
        try:
            request = json.loads(line)
        except json.JSONDecodeError as exc:
            reply = {"error": "InvalidConfigError", "message": str(exc)}
        else:
            reply = handle_request(client, request)
        stdout.write(json.dumps(reply) + "\n")
        stdout.flush()


if __name__ == "__main__":
    serve()
