"""Rule storage: structured rules with versioned text, category management,
near-duplicate detection, and kind classification.

Rules enter the store three ways: imported from a repo rules file (markdown),
created manually, or learned from decisions captured during a session. Every
text change appends a RuleVersion; nothing ever deletes history. Rule ids are
minted from a content hash of the first imported text so re-imports are
idempotent and later edits survive them.
"""

from __future__ import annotations

import itertools
import re
from dataclasses import dataclass, field

from .util import content_hash, first_sentence, now_iso, slugify, token_set

SCHEMA_VERSION = 1

ENFORCEMENT_LEVELS = ("non-strict", "strict", "testable")
RULE_KINDS = ("coding", "process")
RULE_ORIGINS = ("imported", "manual", "learned", "refined")
VERSION_CAUSES = ("import", "edit", "refine-accepted", "merge")

# Imperative verbs that mark a rule as a process obligation (something the
# agent does or asks) rather than a property of the code itself.
PROCESS_VERB_LEXICON = frozenset({"ask", "confirm", "run", "migrate", "notify"})

UNCATEGORIZED = "uncategorized"


class RuleStoreError(Exception):
    pass


@dataclass
class RuleVersion:
    seq: int
    text: str
    cause: str
    timestamp: str = field(default_factory=now_iso, compare=False)
    provenance_note_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "text": self.text,
            "cause": self.cause,
            "timestamp": self.timestamp,
            "provenance_note_ids": list(self.provenance_note_ids),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RuleVersion":
        return cls(
            seq=data["seq"],
            text=data["text"],
            cause=data["cause"],
            timestamp=data["timestamp"],
            provenance_note_ids=list(data.get("provenance_note_ids", [])),
        )


@dataclass
class Rule:
    id: str
    title: str
    description: str
    category: str = UNCATEGORIZED
    enforcement_default: str = "non-strict"
    kind: str = "coding"
    confidence: float = 0.5
    decay: float = 0.5
    scope: str = "repo"
    origin: str = "imported"
    retired: bool = False
    versions: list[RuleVersion] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "title": self.title,
            "description": self.description,
            "category": self.category,
            "enforcement_default": self.enforcement_default,
            "kind": self.kind,
            "confidence": self.confidence,
            "decay": self.decay,
            "scope": self.scope,
            "origin": self.origin,
            "retired": self.retired,
            "versions": [v.to_dict() for v in self.versions],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Rule":
        rule = cls(
            id=data["id"],
            title=data["title"],
            description=data["description"],
            category=data["category"],
            enforcement_default=data["enforcement_default"],
            kind=data["kind"],
            confidence=data["confidence"],
            decay=data["decay"],
            scope=data.get("scope", "repo"),
            origin=data["origin"],
            retired=data.get("retired", False),
            versions=[RuleVersion.from_dict(v) for v in data["versions"]],
        )
        validate_rule(rule)
        return rule


@dataclass
class RuleSet:
    schema_version: int = SCHEMA_VERSION
    rules: dict[str, Rule] = field(default_factory=dict)

    @property
    def categories(self) -> list[str]:
        return sorted({r.category for r in self.rules.values() if not r.retired})

    def active(self) -> list[Rule]:
        return [r for r in self.rules.values() if not r.retired]

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "rules": {rid: rule.to_dict() for rid, rule in self.rules.items()},
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RuleSet":
        return cls(
            schema_version=data["schema_version"],
            rules={rid: Rule.from_dict(r) for rid, r in data["rules"].items()},
        )

    def content_hash(self) -> str:
        return content_hash(self.to_dict())


def validate_rule(rule: Rule) -> None:
    if not rule.id:
        raise RuleStoreError("rule id must be non-empty")
    if not rule.title.strip():
        raise RuleStoreError("rule title must be non-empty")
    if not rule.description.strip():
        raise RuleStoreError("rule description must be non-empty")
    if rule.enforcement_default not in ENFORCEMENT_LEVELS:
        raise RuleStoreError(f"bad enforcement level: {rule.enforcement_default!r}")
    if rule.kind not in RULE_KINDS:
        raise RuleStoreError(f"bad rule kind: {rule.kind!r}")
    if rule.origin not in RULE_ORIGINS:
        raise RuleStoreError(f"bad rule origin: {rule.origin!r}")
    if not (0.0 <= rule.confidence <= 1.0 and 0.0 <= rule.decay <= 1.0):
        raise RuleStoreError("confidence and decay must stay within [0, 1]")
    if not rule.versions:
        raise RuleStoreError("rule must carry at least one version")
    seqs = [v.seq for v in rule.versions]
    if seqs != sorted(seqs) or len(set(seqs)) != len(seqs):
        raise RuleStoreError("version seq numbers must be strictly increasing")
    if rule.versions[-1].text != rule.description:
        raise RuleStoreError("description must equal the latest version text")
    for version in rule.versions:
        if version.cause not in VERSION_CAUSES:
            raise RuleStoreError(f"bad version cause: {version.cause!r}")
        has_notes = bool(version.provenance_note_ids)
        if has_notes != (version.cause == "refine-accepted"):
            raise RuleStoreError(
                "provenance_note_ids must be non-empty exactly for refine-accepted versions"
            )


def mint_rule_id(category: str, text: str) -> str:
    return "rule-" + content_hash(category + "\n" + text)[:12]


def make_rule(
    title: str,
    description: str,
    category: str = UNCATEGORIZED,
    *,
    origin: str = "manual",
    enforcement_default: str = "non-strict",
    kind: str | None = None,
    scope: str = "repo",
    confidence: float = 0.5,
    decay: float = 0.5,
    rule_id: str | None = None,
) -> Rule:
    """Build a draft Rule with a minted id and its initial version."""
    cause = "import" if origin == "imported" else "edit"
    rule = Rule(
        id=rule_id or mint_rule_id(category, description),
        title=title,
        description=description,
        category=category,
        enforcement_default=enforcement_default,
        kind=kind or "coding",
        confidence=confidence,
        decay=decay,
        scope=scope,
        origin=origin,
        versions=[RuleVersion(seq=1, text=description, cause=cause)],
    )
    if kind is None:
        classify_rule_kind(rule)
    return rule


# --- markdown parsing -------------------------------------------------------

_HEADING_RE = re.compile(r"^(#{1,6})\s+(.*\S)\s*$")
_ITEM_RE = re.compile(r"^[-*+]\s+(.*)$")
_FENCE_RE = re.compile(r"^\s*(```+|~~~+)")


def _is_fence(line: str) -> bool:
    return bool(_FENCE_RE.match(line))


def _strip_trailing_blanks(body: list[str]) -> str:
    while body and not body[-1].strip():
        body.pop()
    return "\n".join(body)


def parse_rule_blocks(text: str) -> list[tuple[str, str]]:
    """Split a rules file into (category, body) blocks.

    A block is either a top-level list item (continuation lines stay indented)
    or a paragraph; the nearest enclosing heading, slugified, names the
    category. Fenced code is kept verbatim, blank lines included. Prose that
    sits outside every heading is salvaged into one uncategorized block.
    """
    lines = text.replace("\r\n", "\n").replace("\r", "\n").split("\n")
    blocks: list[tuple[str, str]] = []
    orphan_prose: list[str] = []
    category: str | None = None
    i = 0
    while i < len(lines):
        line = lines[i]
        if not line.strip():
            i += 1
            continue
        heading = _HEADING_RE.match(line)
        if heading:
            category = slugify(heading.group(2))
            i += 1
            continue
        item = _ITEM_RE.match(line)
        if item:
            body = [item.group(1).strip()]
            i += 1
            while i < len(lines) and lines[i].strip() and lines[i][0] in (" ", "\t"):
                body.append(lines[i])
                i += 1
            blocks.append((category or UNCATEGORIZED, _strip_trailing_blanks(body)))
            continue
        # paragraph: runs until a blank line, heading, or item outside a fence
        body: list[str] = []
        in_fence = False
        while i < len(lines):
            current = lines[i]
            if not in_fence:
                if not current.strip():
                    break
                if _HEADING_RE.match(current) or _ITEM_RE.match(current):
                    break
                body.append(current)
                if _is_fence(current):
                    in_fence = True
                i += 1
            else:
                body.append(current)
                if _is_fence(current):
                    in_fence = False
                i += 1
        paragraph = _strip_trailing_blanks(body)
        if not paragraph.strip():
            continue
        if category is None:
            orphan_prose.extend(paragraph.split("\n"))
        else:
            blocks.append((category, paragraph))
    if orphan_prose:
        blocks.append((UNCATEGORIZED, "\n".join(orphan_prose)))
    return [(cat, body) for cat, body in blocks if body.strip()]


def import_rules_file(source_text: str, into: RuleSet | None = None) -> RuleSet:
    """Parse a rules file into the ruleset.

    Ids are content hashes of (category, text), so importing the same file
    twice adds nothing, and a rule edited in the store keeps its edit when the
    original file is imported again.
    """
    ruleset = into if into is not None else RuleSet()
    for category, body in parse_rule_blocks(source_text):
        rid = mint_rule_id(category, body)
        if rid in ruleset.rules:
            continue
        rule = Rule(
            id=rid,
            title=first_sentence(body),
            description=body,
            category=category,
            origin="imported",
            versions=[RuleVersion(seq=1, text=body, cause="import")],
        )
        classify_rule_kind(rule)
        validate_rule(rule)
        ruleset.rules[rid] = rule
    return ruleset


def _fence_parity_odd(text: str) -> bool:
    return sum(1 for line in text.split("\n") if _is_fence(line)) % 2 == 1


def _emit_block(lines: list[str], description: str) -> None:
    rows = description.split("\n")
    # item form would strip a leading-whitespace first line on re-parse
    head_ok = bool(rows[0]) and not rows[0][0].isspace()
    if len(rows) == 1 and head_ok:
        lines.append(f"- {rows[0]}")
    elif head_ok and all(row.strip() and row[0] in (" ", "\t") for row in rows[1:]):
        lines.append(f"- {rows[0]}")
        lines.extend(rows[1:])
    else:
        lines.extend(rows)
    lines.append("")


def serialize_rules_markdown(ruleset: RuleSet) -> str:
    """Render the active rules back to markdown.

    import_rules_file(serialize_rules_markdown(rs)) == rs for any rs produced
    by import_rules_file. A block whose fences never close would swallow
    everything after it on re-parse, so such a block (at most one can come out
    of the parser) is emitted last.
    """
    lines: list[str] = []
    dangling: list[tuple[str, str]] = []
    for category in ruleset.categories:
        members = [r for r in ruleset.active() if r.category == category]
        emitted_heading = False
        for rule in members:
            if _fence_parity_odd(rule.description):
                dangling.append((category, rule.description))
                continue
            if not emitted_heading:
                lines.append(f"# {category}")
                lines.append("")
                emitted_heading = True
            _emit_block(lines, rule.description)
    for category, description in dangling:
        lines.append(f"# {category}")
        lines.append("")
        _emit_block(lines, description)
    return "\n".join(lines).rstrip("\n") + ("\n" if lines else "")


# --- mutation operations ----------------------------------------------------


def upsert_rule(ruleset: RuleSet, draft: Rule) -> RuleSet:
    """Insert a new rule or record an edit to an existing one.

    Editing appends a version with cause "edit"; submitting identical content
    changes nothing. A draft that reuses an existing id must carry the same
    origin as the stored rule.
    """
    if not draft.title.strip():
        raise RuleStoreError("rule title must be non-empty")
    if not draft.description.strip():
        raise RuleStoreError("rule description must be non-empty")
    existing = ruleset.rules.get(draft.id) if draft.id else None
    if existing is None:
        if not draft.id:
            draft.id = mint_rule_id(draft.category, draft.description)
            existing = ruleset.rules.get(draft.id)
    if existing is not None:
        if existing is not draft and existing.origin != draft.origin:
            raise RuleStoreError(
                f"rule {draft.id} already exists with origin "
                f"{existing.origin!r}, not {draft.origin!r}"
            )
        if existing is not draft:
            existing.title = draft.title
            existing.category = draft.category
            existing.enforcement_default = draft.enforcement_default
            existing.kind = draft.kind
            existing.confidence = draft.confidence
            existing.decay = draft.decay
            existing.scope = draft.scope
            existing.description = draft.description
        target = existing
        if target.description != target.versions[-1].text:
            target.versions.append(
                RuleVersion(
                    seq=target.versions[-1].seq + 1,
                    text=target.description,
                    cause="edit",
                )
            )
        validate_rule(target)
        return ruleset
    if not draft.versions:
        cause = "import" if draft.origin == "imported" else "edit"
        draft.versions = [RuleVersion(seq=1, text=draft.description, cause=cause)]
    validate_rule(draft)
    ruleset.rules[draft.id] = draft
    return ruleset


def merge_categories(ruleset: RuleSet, from_categories: list[str], into: str) -> RuleSet:
    """Retag every rule in `from_categories` with the `into` category."""
    into = slugify(into) if into.strip() else ""
    if not into:
        raise RuleStoreError("into category must be non-empty")
    known = set(ruleset.categories)
    for name in from_categories:
        if name not in known:
            raise RuleStoreError(f"unknown category: {name}")
    if into not in known and into not in from_categories:
        raise RuleStoreError(
            f"into category {into!r} must already exist or be one of the merged ones"
        )
    doomed = set(from_categories)
    for rule in ruleset.rules.values():
        if rule.category in doomed:
            rule.category = into
    return ruleset


# --- deduplication ----------------------------------------------------------


@dataclass
class DedupeCluster:
    rule_ids: list[str]
    similarity: float
    proposed_text: str


@dataclass
class DedupeReport:
    threshold: float
    clusters: list[DedupeCluster]


def _rule_tokens(rule: Rule) -> set[str]:
    return token_set(rule.title + " " + rule.description)


def _pair_similarity(a: set[str], b: set[str]) -> float:
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def _proposed_merge_text(rules: dict[str, Rule], member_ids: list[str]) -> str:
    ordered = sorted(member_ids, key=lambda rid: (-len(rules[rid].description), rid))
    primary = rules[ordered[0]].description
    extras = [
        f"(also: {rules[rid].description.strip().rstrip('.')})" for rid in ordered[1:]
    ]
    return " ".join([primary] + extras)


def dedupe_rules(ruleset: RuleSet, threshold: float) -> DedupeReport:
    """Report clusters of near-duplicate active rules.

    Similarity is token Jaccard over lowercased title+description; clusters
    are the transitive closure of pairs at or above the threshold. The report
    is advisory and does not touch the ruleset.
    """
    if not (0.0 < threshold <= 1.0):
        raise RuleStoreError("threshold must be in (0, 1]")
    active = {r.id: r for r in ruleset.active()}
    ids = sorted(active)
    tokens = {rid: _rule_tokens(active[rid]) for rid in ids}
    parent = {rid: rid for rid in ids}

    def find(rid: str) -> str:
        while parent[rid] != rid:
            parent[rid] = parent[parent[rid]]
            rid = parent[rid]
        return rid

    similarities: dict[tuple[str, str], float] = {}
    for a, b in itertools.combinations(ids, 2):
        sim = _pair_similarity(tokens[a], tokens[b])
        similarities[(a, b)] = sim
        if sim >= threshold:
            parent[find(a)] = find(b)

    groups: dict[str, list[str]] = {}
    for rid in ids:
        groups.setdefault(find(rid), []).append(rid)
    clusters = []
    for members in groups.values():
        if len(members) < 2:
            continue
        members = sorted(members)
        edge_sims = [
            similarities[(a, b)]
            for a, b in itertools.combinations(members, 2)
            if similarities[(a, b)] >= threshold
        ]
        clusters.append(
            DedupeCluster(
                rule_ids=members,
                similarity=sum(edge_sims) / len(edge_sims),
                proposed_text=_proposed_merge_text(active, members),
            )
        )
    clusters.sort(key=lambda c: c.rule_ids[0])
    return DedupeReport(threshold=threshold, clusters=clusters)


def apply_dedupe_cluster(ruleset: RuleSet, cluster: DedupeCluster) -> str:
    """Merge a cluster: the lowest id survives with the proposed text, the
    rest are retired (history intact). Returns the surviving rule id."""
    for rid in cluster.rule_ids:
        rule = ruleset.rules.get(rid)
        if rule is None:
            raise RuleStoreError(f"unknown rule in cluster: {rid}")
        if rule.retired:
            raise RuleStoreError(f"rule already retired: {rid}")
    survivor_id = min(cluster.rule_ids)
    survivor = ruleset.rules[survivor_id]
    if survivor.description != cluster.proposed_text:
        survivor.versions.append(
            RuleVersion(
                seq=survivor.versions[-1].seq + 1,
                text=cluster.proposed_text,
                cause="merge",
            )
        )
        survivor.description = cluster.proposed_text
    for rid in cluster.rule_ids:
        if rid != survivor_id:
            ruleset.rules[rid].retired = True
    validate_rule(survivor)
    return survivor_id


def classify_rule_kind(rule: Rule, lexicon: frozenset[str] = PROCESS_VERB_LEXICON) -> str:
    """Tag the rule as a process rule when its text contains one of the
    lexicon verbs as a whole token; everything else is a coding rule. Pass a
    custom lexicon to override the default verbs per call."""
    tokens = token_set(rule.title + " " + rule.description)
    rule.kind = "process" if tokens & set(lexicon) else "coding"
    return rule.kind
