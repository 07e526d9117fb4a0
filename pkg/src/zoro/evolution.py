"""Rule evolution: in-situ notes on evidence, grouped refinement proposals,
learned-rule candidates from recorded user decisions, and score updates.

Proposal generation is all-or-nothing: either every noted rule gets exactly
one proposal, or (when the refiner fails) the previous batch stays untouched
and a diagnostic event records why. Only an explicit accept writes anything
back to the ruleset.
"""

from __future__ import annotations

from uuid import uuid4

from .enforcement import MalformedError, StateError, UnknownIdError
from .rules import Rule, RuleVersion, make_rule, upsert_rule, validate_rule
from .session import Session
from .util import content_hash, content_tokens, first_sentence, now_iso, token_set

USER_DECISION_PREFIX = "user_decision:"

# per-outcome deltas: (confidence, decay), clamped to [0, 1]
_SCORE_DELTAS = {
    "enforced-passed": (0.05, -0.02),
    "enforced-failed": (-0.10, 0.0),
    "refined": (0.0, 0.05),
    "merged": (0.0, 0.05),
    "unused-session": (0.0, 0.01),
}


# --- notes --------------------------------------------------------------------


def attach_note(session: Session, evidence_id: str, text: str, author: str) -> dict:
    """Pin a human remark to one evidence record; the rule id is copied from
    the record so proposals can group notes without chasing references."""
    if not text or not text.strip():
        raise MalformedError("note text must be non-empty")
    record = _find_evidence(session, evidence_id)
    note = {
        "id": "note-" + uuid4().hex[:12],
        "evidence_id": evidence_id,
        "rule_id": record["rule_id"],
        "text": text.strip(),
        "author": author,
        "created_at": now_iso(),
    }

    def check(fresh: Session) -> None:
        if fresh.doc["state"] not in ("executing", "reviewing"):
            raise StateError(f"notes need an executing or reviewing session, not {fresh.doc['state']}")
        _find_evidence(fresh, evidence_id)

    session.commit("note", {"note": note}, validate=check)
    return note


def _find_evidence(session: Session, evidence_id: str) -> dict:
    for records in session.evidence.values():
        for record in records:
            if record["id"] == evidence_id:
                return record
    raise UnknownIdError(f"unknown evidence id: {evidence_id}")


# --- refinement ---------------------------------------------------------------


def refine_text(current_text: str, note_texts: list[str]) -> str:
    """Deterministic refiner: one appended clause per note, in note order."""
    parts = [_terminate(current_text.strip())]
    for note in note_texts:
        clause = note.strip().rstrip(".").strip()
        if len(clause) > 1 and clause[1].islower():
            clause = clause[0].lower() + clause[1:]
        parts.append(f"Additionally, {clause}.")
    return " ".join(parts)


def _terminate(text: str) -> str:
    return text if text.endswith((".", "!", "?")) else text + "."


def _covers_notes(proposed_text: str, note_texts: list[str]) -> bool:
    haystack = token_set(proposed_text)
    for note in note_texts:
        tokens = content_tokens(note)
        if tokens and not (tokens & haystack):
            return False
    return True


def generate_proposals(session: Session, refiner=None) -> list[dict]:
    """Group this session's notes by rule and produce one proposal per noted
    rule, alongside the refreshed learned-rule candidates. A refiner exception
    leaves the previous batch in place and records a diagnostic event."""
    if session.doc["state"] != "reviewing":
        raise StateError(f"proposals need a reviewing session, not {session.doc['state']}")
    session.refresh()
    ruleset = session.workspace.load_rules()
    ruleset_hash = ruleset.content_hash()

    groups: dict[str, list[dict]] = {}
    for note in session.notes:
        groups.setdefault(note["rule_id"], []).append(note)

    proposals = []
    try:
        for rule_id, notes in groups.items():
            rule = ruleset.rules.get(rule_id)
            if rule is None or rule.retired:
                continue
            note_texts = [n["text"] for n in notes]
            if refiner is None:
                proposed = refine_text(rule.description, note_texts)
            else:
                response = refiner(
                    {
                        "rule": {"id": rule_id, "text": rule.description},
                        "notes": [dict(n) for n in notes],
                    }
                )
                proposed = response["proposed_text"]
                if not isinstance(proposed, str) or not proposed.strip():
                    raise ValueError(f"refiner returned no text for {rule_id}")
            note_ids = [n["id"] for n in notes]
            proposals.append(
                {
                    "id": "prop-"
                    + content_hash(rule_id + "\n" + ruleset_hash + "\n" + "\n".join(note_ids))[:12],
                    "rule_id": rule_id,
                    "current_text": rule.description,
                    "proposed_text": proposed,
                    "source_note_ids": note_ids,
                    "status": "pending",
                    "ruleset_hash": ruleset_hash,
                    "low_coverage": not _covers_notes(proposed, note_texts),
                }
            )
    except Exception as exc:  # noqa: BLE001 - refiner is caller-supplied code
        session.commit("diagnostic", {"message": f"proposal generation failed: {exc}"})
        return []

    candidates = learn_rule_candidates(session)
    kept_status = {c["id"]: c["status"] for c in session.candidates}
    for candidate in candidates:
        if candidate["id"] in kept_status:
            candidate["status"] = kept_status[candidate["id"]]

    def check(fresh: Session) -> None:
        if fresh.doc["state"] != "reviewing":
            raise StateError("session left the reviewing state")

    session.commit(
        "proposals", {"proposals": proposals, "candidates": candidates}, validate=check
    )
    return proposals


def decide_proposal(
    session: Session, proposal_id: str, action: str, text: str | None = None
) -> Rule | None:
    """Accept, inline-edit, or reject one pending proposal. Accepting appends
    a rule version carrying the source note ids; rejecting leaves the ruleset
    bytes untouched."""
    if action not in ("accept", "edit", "reject"):
        raise MalformedError(f"action must be accept, edit, or reject, not {action!r}")
    if action == "edit" and not (text and text.strip()):
        raise MalformedError("an edit decision needs replacement text")
    session.refresh()
    proposal = _find_proposal(session, proposal_id)
    if proposal["status"] != "pending":
        raise StateError(f"proposal {proposal_id} was already decided: {proposal['status']}")
    ruleset = session.workspace.load_rules()
    if ruleset.content_hash() != proposal["ruleset_hash"]:
        raise StateError(
            "the ruleset changed after this proposal was generated; regenerate proposals"
        )

    def check(fresh: Session) -> None:
        current = _find_proposal(fresh, proposal_id)
        if current["status"] != "pending":
            raise StateError(f"proposal {proposal_id} was already decided: {current['status']}")

    if action == "reject":
        session.commit(
            "proposal-decision", {"proposal_id": proposal_id, "status": "rejected"}, validate=check
        )
        return None

    new_text = text.strip() if action == "edit" else proposal["proposed_text"]
    rule = ruleset.rules.get(proposal["rule_id"])
    if rule is None:
        raise UnknownIdError(f"unknown rule id: {proposal['rule_id']}")
    rule.description = new_text
    rule.versions.append(
        RuleVersion(
            seq=rule.versions[-1].seq + 1,
            text=new_text,
            cause="refine-accepted",
            provenance_note_ids=list(proposal["source_note_ids"]),
        )
    )
    rule.origin = "refined"
    update_scores(rule, "refined")
    validate_rule(rule)
    session.workspace.save_rules(ruleset)

    data = {
        "proposal_id": proposal_id,
        "status": "accepted" if action == "accept" else "edited-accepted",
    }
    if action == "edit":
        data["proposed_text"] = new_text
    session.commit("proposal-decision", data, validate=check)
    return rule


def _find_proposal(session: Session, proposal_id: str) -> dict:
    for proposal in session.proposals:
        if proposal["id"] == proposal_id:
            return proposal
    raise UnknownIdError(f"unknown proposal id: {proposal_id}")


# --- learned rules ------------------------------------------------------------


def learn_rule_candidates(session: Session) -> list[dict]:
    """Deterministic extraction: every evidence summary carrying the
    user-decision marker yields one candidate, in event order."""
    records = sorted(
        (r for recs in session.evidence.values() for r in recs),
        key=lambda r: r["event_seq"],
    )
    candidates = []
    for record in records:
        summary = record["summary"]
        if not summary.startswith(USER_DECISION_PREFIX):
            continue
        decision = summary[len(USER_DECISION_PREFIX) :].strip()
        if not decision:
            continue
        candidates.append(
            {
                "id": "cand-" + content_hash(record["id"])[:12],
                "suggested_title": first_sentence(decision),
                "suggested_text": f"Honor the recorded user decision: {decision}.",
                "trigger": {"evidence_id": record["id"], "event_seq": record["event_seq"]},
                "status": "pending",
            }
        )
    return candidates


def decide_candidate(session: Session, candidate_id: str, action: str) -> Rule | None:
    """Accepting a candidate upserts a learned, non-strict, uncategorized rule."""
    if action not in ("accept", "reject"):
        raise MalformedError(f"action must be accept or reject, not {action!r}")
    session.refresh()
    candidate = _find_candidate(session, candidate_id)
    if candidate["status"] != "pending":
        raise StateError(f"candidate {candidate_id} was already decided: {candidate['status']}")

    def check(fresh: Session) -> None:
        current = _find_candidate(fresh, candidate_id)
        if current["status"] != "pending":
            raise StateError(f"candidate {candidate_id} was already decided: {current['status']}")

    if action == "reject":
        session.commit(
            "candidate-decision",
            {"candidate_id": candidate_id, "status": "rejected"},
            validate=check,
        )
        return None

    rule = make_rule(
        candidate["suggested_title"],
        candidate["suggested_text"],
        category="uncategorized",
        origin="learned",
        enforcement_default="non-strict",
    )
    ruleset = session.workspace.load_rules()
    upsert_rule(ruleset, rule)
    session.workspace.save_rules(ruleset)
    session.commit(
        "candidate-decision",
        {"candidate_id": candidate_id, "status": "accepted"},
        validate=check,
    )
    return rule


def _find_candidate(session: Session, candidate_id: str) -> dict:
    for candidate in session.candidates:
        if candidate["id"] == candidate_id:
            return candidate
    raise UnknownIdError(f"unknown candidate id: {candidate_id}")


# --- scores -------------------------------------------------------------------


def update_scores(rule: Rule, outcome: str) -> Rule:
    """Apply the per-outcome confidence/decay deltas, clamped to [0, 1]."""
    deltas = _SCORE_DELTAS.get(outcome)
    if deltas is None:
        raise MalformedError(f"unknown score outcome: {outcome!r}")
    d_confidence, d_decay = deltas
    rule.confidence = min(1.0, max(0.0, rule.confidence + d_confidence))
    rule.decay = min(1.0, max(0.0, rule.decay + d_decay))
    return rule
