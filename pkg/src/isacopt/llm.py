"""Prompt-driven user-association solver.

A chat backend is anything callable on a PromptBundle that returns text.
The optimization loop builds a prompt around the SINR table, parses the
strict single-line ASSIGNMENT grammar out of the reply, keeps the best
valid association seen, and feeds the previous round's solution back in
a self-enhancement section until improvement stalls.

StubBackend is a deterministic offline surrogate: greedy assignment on
round one, then one best single-CU improving transfer per reflection
round, always emitting the expected grammar.
"""

from __future__ import annotations

import json
import math
import re
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .metrics import UAMatrix
from .ua import RateTable, ua_objective, best_transfer


ASSIGNMENT_RE = re.compile(r"ASSIGNMENT:\s*\[([^\]]*)\]")


class LlmResponseError(ValueError):
    """Base class for unusable backend replies."""


class ParseError(LlmResponseError):
    """No ASSIGNMENT line found in the reply."""


class ValidationError(LlmResponseError):
    """ASSIGNMENT line found but the assignment is invalid."""


class BackendError(RuntimeError):
    """Backend failed after its own retries.

    best_so_far carries (UAMatrix, objective) when at least one valid
    round completed before the failure, else None.
    """

    def __init__(self, message, best_so_far=None):
        super().__init__(message)
        self.best_so_far = best_so_far


@dataclass(frozen=True)
class PromptBundle:
    """The five prompt sections, emitted in this order.

    self_enhancement is empty on the first round and carries the prior
    assignment plus its objective on reflection rounds.
    """

    background: str
    problem_description: str
    task_instructions: str
    self_enhancement: str
    expected_output_schema: str

    def render(self) -> str:
        parts = [
            "=== BACKGROUND ===\n" + self.background,
            "=== OPTIMIZATION PROBLEM ===\n" + self.problem_description,
            "=== TASK INSTRUCTIONS ===\n" + self.task_instructions,
        ]
        if self.self_enhancement:
            parts.append("=== SELF-ENHANCEMENT ===\n" + self.self_enhancement)
        parts.append("=== EXPECTED OUTPUT ===\n" + self.expected_output_schema)
        return "\n\n".join(parts)


@dataclass(frozen=True)
class LlmBackendConfig:
    """HTTP chat backend settings. The API key is read from the named
    environment variable, never stored here."""

    endpoint_url: str
    model_name: str
    api_key_env: str = "OPENAI_API_KEY"
    temperature: float = 0.0
    timeout: float = 60.0
    max_retries: int = 2

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")


@dataclass
class TranscriptEntry:
    round: int
    prompt: str
    response: str
    assignment: list | None     # 1-based, as parsed
    objective: float | None
    error: str | None = None

    def to_dict(self):
        return asdict(self)


def _format_sinr_rows(gamma):
    rows = []
    for k in range(gamma.shape[0]):
        vals = ", ".join(f"{v:.6g}" for v in gamma[k])
        rows.append(f"BS {k + 1}: [{vals}]")
    return "\n".join(rows)


def build_prompt(t: RateTable, k, n, prior=None) -> PromptBundle:
    """Assemble the prompt around a SINR table.

    prior, when given, is (assignment_1_based, objective) from the
    previous round and is embedded verbatim in the self-enhancement
    section.
    """
    if t.gamma.shape != (k, n):
        raise ValueError(f"table shape {t.gamma.shape} does not match (K, N) = ({k}, {n})")

    background = (
        "You are an expert in wireless communications and combinatorial "
        "network optimization.\n"
        f"A downlink network has {k} base stations (BSs) serving {n} "
        "communication users (CUs).\n"
        f"Number of BSs: {k}\n"
        f"Number of CUs: {n}\n"
        "Association rules:\n"
        "- Every CU is served by exactly one BS.\n"
        "- Every BS must serve at least one CU.\n"
        "- A BS splits its bandwidth equally among the CUs it serves.\n"
        "Under a fixed SINR table, the rate of CU i when served by BS k is "
        "the Shannon capacity with the bandwidth split applied:\n"
        "rate(k, i) = (1 / n_k) * log2(1 + SINR[k][i]),\n"
        "where n_k is the number of CUs served by BS k."
    )

    problem = (
        "Choose the association of CUs to BSs.\n"
        "SINR matrix, row k = BS k, column i = CU i:\n"
        f"{_format_sinr_rows(t.gamma)}\n"
        "** OBJECTIVE ** maximize the total sum rate, i.e. the sum of "
        "rate(k_i, i) over all CUs i, where k_i is the BS serving CU i.\n"
        "** CONSTRAINTS ** each CU is assigned to exactly one BS; every BS "
        "serves at least one CU."
    )

    task = (
        "Work step by step:\n"
        "1. Write down the optimization model implied by the objective and "
        "constraints above.\n"
        "2. Note that the per-CU rate on a BS shrinks as that BS serves "
        "more CUs, because the bandwidth is split.\n"
        "3. When a BS's contribution is dominated by one CU, give priority "
        "to the CU with the largest SINR on that BS.\n"
        "4. Search for the association that maximizes the total sum rate "
        "under the constraints, checking candidate reassignments of single "
        "CUs before settling."
    )

    if prior is None:
        enhancement = ""
    else:
        assignment, objective = prior
        assignment_str = "[" + ", ".join(str(int(b)) for b in assignment) + "]"
        enhancement = (
            "A previous attempt produced:\n"
            f"Previous assignment: {assignment_str}\n"
            f"Previous objective: {objective!r}\n"
            "Review that solution. Look for a single-CU reassignment that "
            "strictly increases the total sum rate while keeping every BS "
            "non-empty. If one exists, output the improved assignment; "
            "otherwise output the previous assignment unchanged."
        )

    schema = (
        "Finish your reply with exactly one line of the form:\n"
        f"ASSIGNMENT: [b_1, b_2, ..., b_{n}]\n"
        f"where b_i is the 1-based index (1..{k}) of the BS serving CU i. "
        "If that line appears more than once, only the last occurrence "
        "counts."
    )

    return PromptBundle(
        background=background,
        problem_description=problem,
        task_instructions=task,
        self_enhancement=enhancement,
        expected_output_schema=schema,
    )


def parse_response(text, k, n):
    """Extract and validate the last ASSIGNMENT line.

    Returns the 1-based assignment list. Raises ParseError when no line
    matches the grammar, ValidationError when the assignment violates
    length, range or BS coverage.
    """
    matches = ASSIGNMENT_RE.findall(text)
    if not matches:
        raise ParseError("no ASSIGNMENT: [...] line in the response")
    body = matches[-1]
    try:
        values = [int(tok) for tok in body.split(",")] if body.strip() else []
    except ValueError as exc:
        raise ParseError(f"non-integer entry in ASSIGNMENT line: {exc}") from exc
    if len(values) != n:
        raise ValidationError(f"assignment has {len(values)} entries, expected {n}")
    if any(not 1 <= b <= k for b in values):
        raise ValidationError(f"assignment entries must lie in 1..{k}")
    if len(set(values)) < k:
        missing = sorted(set(range(1, k + 1)) - set(values))
        raise ValidationError(f"BS(s) {missing} serve no CU")
    return values


# ---------------------------------------------------------------------------
# Backends

_NUM_BS_RE = re.compile(r"Number of BSs: (\d+)")
_NUM_CU_RE = re.compile(r"Number of CUs: (\d+)")
_SINR_ROW_RE = re.compile(r"^BS (\d+): \[([^\]]*)\]$", re.MULTILINE)
_PRIOR_RE = re.compile(r"Previous assignment: \[([^\]]*)\]")


class StubBackend:
    """Deterministic offline surrogate for a hosted chat model.

    It reads K, N, the SINR matrix and any embedded prior assignment back
    out of the prompt text, exactly as a text-only model would have to.
    Round one answers with the per-CU argmax-SINR assignment repaired so
    no BS is idle; reflection rounds apply the best single-CU improving
    transfer to the prior assignment, or repeat it at a local optimum.
    """

    def __call__(self, prompt: PromptBundle) -> str:
        text = prompt.render()
        k = int(_NUM_BS_RE.search(text).group(1))
        n = int(_NUM_CU_RE.search(text).group(1))
        gamma = np.zeros((k, n))
        for m in _SINR_ROW_RE.finditer(text):
            gamma[int(m.group(1)) - 1] = [float(v) for v in m.group(2).split(",")]
        log_table = np.log2(1.0 + gamma)

        prior_match = _PRIOR_RE.search(text)
        if prior_match is None:
            bs_of_cu = self._greedy(gamma, log_table)
            note = "Greedy pick per CU with idle-BS repair."
        else:
            bs_of_cu = np.array([int(v) - 1 for v in prior_match.group(1).split(",")])
            move = best_transfer(bs_of_cu, log_table, 1.0)
            if move is None:
                note = "No single-CU transfer improves the previous assignment."
            else:
                i, dst = move
                note = f"Moved CU {i + 1} to BS {dst + 1}."
                bs_of_cu = bs_of_cu.copy()
                bs_of_cu[i] = dst

        body = ", ".join(str(int(b) + 1) for b in bs_of_cu)
        return f"{note}\nASSIGNMENT: [{body}]"

    @staticmethod
    def _greedy(gamma, log_table):
        k, n = gamma.shape
        bs_of_cu = gamma.argmax(axis=0)
        counts = np.bincount(bs_of_cu, minlength=k)
        for empty in np.flatnonzero(counts == 0):
            best_i, best_gain = None, -math.inf
            for i in range(n):
                if counts[bs_of_cu[i]] < 2:
                    continue
                if gamma[empty, i] > best_gain:
                    best_gain = gamma[empty, i]
                    best_i = i
            counts[bs_of_cu[best_i]] -= 1
            bs_of_cu[best_i] = empty
            counts[empty] += 1
        return bs_of_cu


class HttpChatBackend:
    """Chat-completions-style HTTP backend.

    POSTs the rendered prompt as a single user message and returns the
    first choice's message content. Retries transport errors and 5xx
    responses up to max_retries times.
    """

    def __init__(self, config: LlmBackendConfig, session=None):
        import requests  # deferred so offline use never needs it

        self.config = config
        self._session = session if session is not None else requests.Session()

    def __call__(self, prompt: PromptBundle) -> str:
        import os

        cfg = self.config
        payload = {
            "model": cfg.model_name,
            "messages": [{"role": "user", "content": prompt.render()}],
            "temperature": cfg.temperature,
        }
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(cfg.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"

        last_err = None
        for attempt in range(cfg.max_retries + 1):
            try:
                resp = self._session.post(cfg.endpoint_url, json=payload,
                                          headers=headers, timeout=cfg.timeout)
                if resp.status_code >= 500:
                    raise RuntimeError(f"server error {resp.status_code}")
                if resp.status_code != 200:
                    raise BackendError(f"chat endpoint returned {resp.status_code}: "
                                       f"{resp.text[:200]}")
                data = resp.json()
                return data["choices"][0]["message"]["content"]
            except BackendError:
                raise
            except Exception as exc:  # transport errors, 5xx, bad JSON
                last_err = exc
                if attempt < cfg.max_retries:
                    time.sleep(min(2.0 ** attempt, 8.0))
        raise BackendError(f"chat backend failed after {cfg.max_retries + 1} attempts: {last_err}")


# ---------------------------------------------------------------------------
# Optimization loop

def llm_optimize_ua(t: RateTable, B, backend, max_rounds=5, patience=2):
    """Run the prompt/parse/self-enhance loop and keep the best association.

    Stops after max_rounds, after `patience` consecutive rounds without a
    new best objective, or when two consecutive rounds return identical
    assignments. An invalid reply triggers one re-prompt carrying the
    validation error before the round counts as failed.

    Returns (UAMatrix, objective, transcript). The reported objective is
    the best seen, so it never regresses across rounds.
    """
    k, n = t.K, t.N
    transcript = []
    best_u = None
    best_obj = -math.inf
    prior = None
    prev_assignment = None
    stall = 0

    for rnd in range(1, max_rounds + 1):
        bundle = build_prompt(t, k, n, prior)
        assignment = None
        error_note = None
        try:
            response = backend(bundle)
        except BackendError:
            raise
        except LlmResponseError:
            raise
        except Exception as exc:
            raise BackendError(f"backend raised: {exc}",
                               best_so_far=None if best_u is None else (best_u, best_obj))

        try:
            assignment = parse_response(response, k, n)
        except LlmResponseError as first_err:
            retry_bundle = PromptBundle(
                background=bundle.background,
                problem_description=bundle.problem_description,
                task_instructions=bundle.task_instructions
                + f"\nYour previous reply was rejected: {first_err}. "
                  "Reply again following the expected output format exactly.",
                self_enhancement=bundle.self_enhancement,
                expected_output_schema=bundle.expected_output_schema,
            )
            transcript.append(TranscriptEntry(rnd, bundle.render(), response,
                                              None, None, str(first_err)))
            bundle = retry_bundle
            try:
                response = backend(bundle)
                assignment = parse_response(response, k, n)
            except LlmResponseError as second_err:
                error_note = str(second_err)
            except BackendError:
                raise

        if assignment is None:
            transcript.append(TranscriptEntry(rnd, bundle.render(), response,
                                              None, None, error_note))
            stall += 1
        else:
            u = UAMatrix.from_assignment(np.asarray(assignment) - 1, k)
            obj = ua_objective(u, t, B)
            transcript.append(TranscriptEntry(rnd, bundle.render(), response,
                                              assignment, obj))
            if obj > best_obj + 1e-12:
                best_obj = obj
                best_u = u
                stall = 0
            else:
                stall += 1
            if prev_assignment is not None and assignment == prev_assignment:
                break
            prev_assignment = assignment
            prior = (assignment, obj)

        if stall >= patience:
            break

    if best_u is None:
        raise BackendError(f"no valid assignment produced in {max_rounds} rounds")
    return best_u, best_obj, transcript


def write_transcript(path, transcript):
    """Persist a transcript as line-delimited JSON records."""
    with open(path, "w") as fh:
        for entry in transcript:
            fh.write(json.dumps(entry.to_dict()) + "\n")
