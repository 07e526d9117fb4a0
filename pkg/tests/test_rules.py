"""Rule store behavior: parsing, round-trips, versioning, categories, dedupe, kinds.

Expected values in this file were computed by hand or by the independent
brute-force helpers defined below, never by running the implementation first.
"""

from __future__ import annotations

import itertools
import re
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zoro.rules import (
    RuleStoreError,
    apply_dedupe_cluster,
    classify_rule_kind,
    dedupe_rules,
    import_rules_file,
    make_rule,
    merge_categories,
    serialize_rules_markdown,
    upsert_rule,
)

CORPUS = Path(__file__).parent / "fixtures" / "rules_corpus"


def corpus_files() -> list[Path]:
    return sorted(CORPUS.glob("*.md"))


def load(name: str) -> str:
    return (CORPUS / name).read_text(encoding="utf-8")


# --- independent oracle helpers (deliberately not importing zoro.util) ---


def oracle_tokens(text: str) -> set[str]:
    return set(re.findall(r"[a-z0-9]+", text.lower()))


def oracle_jaccard(a: set[str], b: set[str]) -> float:
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


def brute_force_clusters(rules, threshold):
    """O(n^2) pairwise scan + BFS closure; the reference for dedupe_rules."""
    ids = sorted(r.id for r in rules)
    toks = {r.id: oracle_tokens(r.title + " " + r.description) for r in rules}
    sim = {}
    neighbors = {rid: set() for rid in ids}
    for a, b in itertools.combinations(ids, 2):
        s = oracle_jaccard(toks[a], toks[b])
        sim[(a, b)] = s
        if s >= threshold:
            neighbors[a].add(b)
            neighbors[b].add(a)
    seen, clusters = set(), []
    for rid in ids:
        if rid in seen or not neighbors[rid]:
            continue
        component, frontier = set(), [rid]
        while frontier:
            cur = frontier.pop()
            if cur in component:
                continue
            component.add(cur)
            frontier.extend(neighbors[cur] - component)
        seen |= component
        members = sorted(component)
        edge_sims = [
            sim[(a, b)]
            for a, b in itertools.combinations(members, 2)
            if sim[(a, b)] >= threshold
        ]
        clusters.append((members, sum(edge_sims) / len(edge_sims)))
    return clusters


class TestImportParsing:
    def test_empty_file_yields_empty_ruleset(self):
        rs = import_rules_file(load("01_empty.md"))
        assert rs.rules == {}
        assert rs.categories == []

    def test_three_headings_two_bullets_each(self):
        rs = import_rules_file(load("02_basic_three_headings.md"))
        assert len(rs.rules) == 6, f"expected 6 rules, got {len(rs.rules)}"
        assert rs.categories == ["backend", "frontend", "process"]
        by_cat = {}
        for rule in rs.rules.values():
            by_cat.setdefault(rule.category, []).append(rule.description)
        assert by_cat["backend"] == [
            "Keep service functions free of framework imports.",
            "Return typed domain objects from API methods.",
        ]
        assert by_cat["process"] == [
            "Ask the user before introducing a new color.",
            "Run the migration script after any schema change.",
        ]

    def test_import_defaults(self):
        rs = import_rules_file(load("02_basic_three_headings.md"))
        for rule in rs.rules.values():
            assert rule.origin == "imported"
            assert rule.confidence == 0.5
            assert rule.decay == 0.5
            assert len(rule.versions) == 1
            assert rule.versions[0].cause == "import"
            assert rule.versions[0].text == rule.description

    def test_items_without_heading_are_uncategorized(self):
        rs = import_rules_file(load("05_no_headings.md"))
        assert len(rs.rules) == 2
        assert rs.categories == ["uncategorized"]

    def test_prose_without_heading_collapses_to_one_rule(self):
        rs = import_rules_file(load("06_prose_only.md"))
        assert len(rs.rules) == 1
        (rule,) = rs.rules.values()
        assert rule.category == "uncategorized"
        assert "deploy window" in rule.description
        assert "ticket reference" in rule.description

    def test_leading_prose_plus_sections(self):
        rs = import_rules_file(load("07_mixed_leading_prose.md"))
        cats = sorted(r.category for r in rs.rules.values())
        assert cats == ["testing", "testing", "uncategorized"]

    def test_nearest_heading_wins(self):
        rs = import_rules_file(load("11_deep_headings.md"))
        got = {r.description.split()[0].lower(): r.category for r in rs.rules.values()}
        assert got == {
            "platform": "platform",
            "storage": "storage",
            "backups": "backups",
            "internal": "networking",
        }

    def test_duplicate_text_collapses_by_content_hash(self):
        rs = import_rules_file(load("12_duplicate_text.md"))
        assert len(rs.rules) == 2

    def test_star_and_plus_markers(self):
        rs = import_rules_file(load("14_star_plus_markers.md"))
        assert len(rs.rules) == 2

    def test_kitchen_sink_block_accounting(self):
        # 1 collected leading prose + 3 under data + 1 under data_quality + 2 under ops
        rs = import_rules_file(load("20_kitchen_sink.md"))
        assert len(rs.rules) == 7
        assert rs.categories == ["data", "data_quality", "ops", "uncategorized"]

    def test_unicode_headings_slugify(self):
        rs = import_rules_file(load("10_unicode.md"))
        assert rs.categories == ["sch_ma_donn_es"]

    def test_multiline_item_keeps_continuation_lines(self):
        rs = import_rules_file(load("09_multiline_items.md"))
        descs = [r.description for r in rs.rules.values()]
        long_one = [d for d in descs if "\n" in d]
        assert len(long_one) == 1
        assert "exponential backoff" in long_one[0]

    def test_crlf_input_normalized(self):
        rs = import_rules_file(load("19_crlf.md"))
        assert len(rs.rules) == 2
        for rule in rs.rules.values():
            assert "\r" not in rule.description


class TestRoundTrip:
    @pytest.mark.parametrize("path", corpus_files(), ids=lambda p: p.name)
    def test_import_serialize_import_fixed_point(self, path):
        first = import_rules_file(path.read_text(encoding="utf-8"))
        second = import_rules_file(serialize_rules_markdown(first))
        assert second == first, f"round trip changed ruleset for {path.name}"

    def test_fenced_block_survives_byte_for_byte(self):
        fence = "```python\nlog = get_logger(__name__)\nlog.info(\"payload\", extra={\"request_id\": rid})\n```"
        rs = import_rules_file(load("04_code_fence.md"))
        carrying = [r for r in rs.rules.values() if "```" in r.description]
        assert len(carrying) == 1
        assert fence in carrying[0].description
        again = import_rules_file(serialize_rules_markdown(rs))
        carrying2 = [r for r in again.rules.values() if "```" in r.description]
        assert fence in carrying2[0].description

    def test_fence_with_blank_lines_and_hash_survives(self):
        rs = import_rules_file(load("13_fence_with_blanks.md"))
        body = next(r.description for r in rs.rules.values() if "```sql" in r.description)
        assert "\n\nALTER TABLE" in body
        assert "# not a heading, just a comment inside the fence" in body
        again = import_rules_file(serialize_rules_markdown(rs))
        body2 = next(r.description for r in again.rules.values() if "```sql" in r.description)
        assert body2 == body

    def test_reimport_is_idempotent(self):
        text = load("03_logpose.md")
        rs = import_rules_file(text)
        ids_before = sorted(rs.rules)
        rs = import_rules_file(text, into=rs)
        assert sorted(rs.rules) == ids_before
        for rule in rs.rules.values():
            assert len(rule.versions) == 1

    def test_reimport_preserves_in_app_edits(self):
        text = load("02_basic_three_headings.md")
        rs = import_rules_file(text)
        rid = sorted(rs.rules)[0]
        edited = rs.rules[rid]
        edited.description = "Edited text that must survive re-import."
        upsert_rule(rs, edited)
        rs = import_rules_file(text, into=rs)
        assert rs.rules[rid].description == "Edited text that must survive re-import."

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(
            st.sampled_from(
                [
                    "# Alpha Section",
                    "## Beta",
                    "- keep things small.",
                    "- validate inputs early.",
                    "* prefer pure functions.",
                    "+ measure before tuning.",
                    "plain prose line one.",
                    "another prose line.",
                    "```",
                    "code_inside = fence()",
                    "  indented continuation line",
                    "",
                ]
            ),
            max_size=24,
        )
    )
    def test_fixed_point_on_fuzzed_documents(self, lines):
        text = "\n".join(lines)
        first = import_rules_file(text)
        second = import_rules_file(serialize_rules_markdown(first))
        assert second == first


class TestUpsert:
    def test_mints_id_and_initial_version(self):
        rs = import_rules_file("")
        rule = make_rule("Ask before pushing", "Ask before pushing to shared branches.")
        upsert_rule(rs, rule)
        assert rule.id in rs.rules
        assert rs.rules[rule.id].origin == "manual"
        assert [v.cause for v in rs.rules[rule.id].versions] == ["edit"]

    def test_edit_appends_version(self):
        rs = import_rules_file(load("02_basic_three_headings.md"))
        rid = sorted(rs.rules)[0]
        rule = rs.rules[rid]
        rule.description = "Tightened wording for the same rule."
        upsert_rule(rs, rule)
        versions = rs.rules[rid].versions
        assert [v.seq for v in versions] == [1, 2]
        assert versions[-1].cause == "edit"
        assert versions[-1].text == "Tightened wording for the same rule."

    def test_identical_upsert_is_noop(self):
        rs = import_rules_file(load("02_basic_three_headings.md"))
        rid = sorted(rs.rules)[0]
        before = [v.seq for v in rs.rules[rid].versions]
        upsert_rule(rs, rs.rules[rid])
        assert [v.seq for v in rs.rules[rid].versions] == before

    def test_origin_mismatch_rejected(self):
        rs = import_rules_file(load("02_basic_three_headings.md"))
        rid = sorted(rs.rules)[0]
        clone = make_rule("x", rs.rules[rid].description, origin="manual")
        clone.id = rid
        with pytest.raises(RuleStoreError, match="origin"):
            upsert_rule(rs, clone)

    def test_empty_title_or_description_rejected(self):
        rs = import_rules_file("")
        with pytest.raises(RuleStoreError):
            upsert_rule(rs, make_rule("", "body"))
        with pytest.raises(RuleStoreError):
            upsert_rule(rs, make_rule("title", "   "))

    def test_version_history_append_only(self):
        rs = import_rules_file(load("02_basic_three_headings.md"))
        rid = sorted(rs.rules)[0]
        rule = rs.rules[rid]
        seen = [(v.seq, v.text) for v in rule.versions]
        for i in range(3):
            rule.description = f"revision {i}"
            upsert_rule(rs, rule)
            now = [(v.seq, v.text) for v in rule.versions]
            assert now[: len(seen)] == seen, "existing versions were rewritten"
            seen = now
        assert [v.seq for v in rule.versions] == [1, 2, 3, 4]


class TestMergeCategories:
    def test_merge_two_into_one(self):
        rs = import_rules_file(load("02_basic_three_headings.md"))
        assert rs.categories == ["backend", "frontend", "process"]
        merge_categories(rs, ["frontend", "process"], "backend")
        assert rs.categories == ["backend"]

    def test_cardinality_drop_equals_from_minus_into(self):
        rs = import_rules_file(load("11_deep_headings.md"))
        before = len(rs.categories)
        merge_categories(rs, ["storage", "backups", "platform"], "platform")
        assert before - len(rs.categories) == len({"storage", "backups", "platform"} - {"platform"})

    def test_self_merge_is_noop(self):
        rs = import_rules_file(load("02_basic_three_headings.md"))
        snapshot = rs.content_hash()
        merge_categories(rs, ["backend"], "backend")
        assert rs.content_hash() == snapshot

    def test_empty_into_rejected(self):
        rs = import_rules_file(load("02_basic_three_headings.md"))
        with pytest.raises(RuleStoreError, match="into"):
            merge_categories(rs, ["backend"], "")

    def test_unknown_from_rejected(self):
        rs = import_rules_file(load("02_basic_three_headings.md"))
        with pytest.raises(RuleStoreError, match="unknown"):
            merge_categories(rs, ["nope"], "backend")

    def test_descriptions_untouched_by_merge(self):
        rs = import_rules_file(load("02_basic_three_headings.md"))
        texts = sorted(r.description for r in rs.rules.values())
        merge_categories(rs, ["frontend"], "backend")
        assert sorted(r.description for r in rs.rules.values()) == texts
        for rule in rs.rules.values():
            assert len(rule.versions) == 1


class TestDedupe:
    def test_hand_computed_button_cluster(self):
        # R1 tokens {buttons,should,be,imported,from,the,design,system} (8)
        # R3 adds {package} (9): J = 8/9. R2 overlaps {buttons,from}: J = 2/12.
        rs = import_rules_file(load("17_near_duplicates.md"))
        report = dedupe_rules(rs, threshold=0.8)
        assert len(report.clusters) == 1
        cluster = report.clusters[0]
        texts = sorted(rs.rules[rid].description for rid in cluster.rule_ids)
        assert texts == [
            "Buttons should be imported from the design system package.",
            "Buttons should be imported from the design system.",
        ]
        assert cluster.similarity == pytest.approx(8 / 9)

    def test_transitive_closure_at_low_threshold(self):
        rs = import_rules_file(load("17_near_duplicates.md"))
        report = dedupe_rules(rs, threshold=0.15)
        assert len(report.clusters) == 1
        assert len(report.clusters[0].rule_ids) == 3

    @pytest.mark.parametrize("path", corpus_files(), ids=lambda p: p.name)
    @pytest.mark.parametrize("threshold", [0.2, 0.5, 0.8, 1.0])
    def test_matches_brute_force_oracle(self, path, threshold):
        rs = import_rules_file(path.read_text(encoding="utf-8"))
        active = [r for r in rs.rules.values() if not r.retired]
        assert len(active) <= 50, "corpus files must stay within the oracle bound"
        expected = brute_force_clusters(active, threshold)
        report = dedupe_rules(rs, threshold=threshold)
        got = [(sorted(c.rule_ids), c.similarity) for c in report.clusters]
        got.sort()
        expected.sort()
        assert [g[0] for g in got] == [e[0] for e in expected], path.name
        for (_, gs), (_, es) in zip(got, expected):
            assert gs == pytest.approx(es)

    def test_every_cluster_has_at_least_two_members(self):
        for path in corpus_files():
            rs = import_rules_file(path.read_text(encoding="utf-8"))
            for threshold in (0.3, 0.7):
                for cluster in dedupe_rules(rs, threshold).clusters:
                    assert len(cluster.rule_ids) >= 2

    def test_threshold_zero_rejected(self):
        rs = import_rules_file(load("17_near_duplicates.md"))
        with pytest.raises(RuleStoreError, match="threshold"):
            dedupe_rules(rs, threshold=0)
        with pytest.raises(RuleStoreError, match="threshold"):
            dedupe_rules(rs, threshold=1.2)

    def test_report_is_advisory(self):
        rs = import_rules_file(load("17_near_duplicates.md"))
        snapshot = rs.content_hash()
        dedupe_rules(rs, threshold=0.8)
        assert rs.content_hash() == snapshot

    def test_apply_cluster_merges_and_retires(self):
        rs = import_rules_file(load("17_near_duplicates.md"))
        report = dedupe_rules(rs, threshold=0.8)
        cluster = report.clusters[0]
        survivor_id = apply_dedupe_cluster(rs, cluster)
        survivor = rs.rules[survivor_id]
        assert survivor.description == cluster.proposed_text
        assert survivor.versions[-1].cause == "merge"
        absorbed = [rid for rid in cluster.rule_ids if rid != survivor_id]
        for rid in absorbed:
            assert rs.rules[rid].retired
            assert len(rs.rules[rid].versions) >= 1
        # retired rules drop out of the active set but keep their history
        follow_up = dedupe_rules(rs, threshold=0.8)
        assert all(set(c.rule_ids).isdisjoint(absorbed) for c in follow_up.clusters)

    def test_identical_rules_cluster_at_threshold_one(self):
        # token sets are equal even though casing and punctuation differ
        rs = import_rules_file("")
        upsert_rule(rs, make_rule("Tokens match", "Tokens match exactly here.", category="x"))
        upsert_rule(rs, make_rule("tokens MATCH", "tokens MATCH exactly here!", category="y"))
        report = dedupe_rules(rs, threshold=1.0)
        assert len(report.clusters) == 1


# Hand-labeled before the classifier was written; lexicon is ask/confirm/run/
# migrate/notify as whole tokens of title+description.
KIND_ANSWER_KEY = [
    ("Always ask the user before introducing a new color.", "process"),
    ("Ensure all schema changes properly backfill or migrate existing data.", "process"),
    ("Follow existing repository patterns for consistency.", "coding"),
    ("API methods must return typed domain objects.", "coding"),
    ("Run the full test suite before merging.", "process"),
    ("Notify the on-call channel before deploys.", "process"),
    ("Confirm destructive migrations with the user.", "process"),
    ("Prefer composition over inheritance.", "coding"),
    ("Keep functions under fifty lines.", "coding"),
    ("Use dependency injection for services.", "coding"),
    ("Ask for review on cross-team changes.", "process"),
    ("Cache expensive queries at the edge.", "coding"),
    ("Migrate legacy tables before adding columns.", "process"),
    ("Handle null payloads defensively.", "coding"),
    ("Run linters in CI.", "process"),
    ("Notify stakeholders when APIs change.", "process"),
    ("Avoid global mutable state.", "coding"),
    ("Keep secrets out of source control.", "coding"),
    ("Confirm the rollout plan with the platform team.", "process"),
    ("Write docstrings for public modules.", "coding"),
]


class TestKindClassification:
    def test_twenty_rule_answer_key(self):
        misses = []
        for text, expected in KIND_ANSWER_KEY:
            rule = make_rule(text, text)
            got = classify_rule_kind(rule)
            if got != expected:
                misses.append((text, expected, got))
        assert not misses, f"classifier disagreed with answer key: {misses}"

    def test_classification_stored_on_rule(self):
        rule = make_rule("x", "Run the suite.")
        classify_rule_kind(rule)
        assert rule.kind == "process"

    def test_empty_lexicon_classifies_everything_coding(self):
        for text, _ in KIND_ANSWER_KEY:
            rule = make_rule(text, text)
            assert classify_rule_kind(rule, lexicon=frozenset()) == "coding"

    def test_custom_lexicon_overrides(self):
        rule = make_rule("x", "Deploy the service.")
        assert classify_rule_kind(rule) == "coding"
        assert classify_rule_kind(rule, lexicon=frozenset({"deploy"})) == "process"


class TestRulesetIntegrity:
    def test_scores_stay_in_unit_interval_across_corpus(self):
        for path in corpus_files():
            rs = import_rules_file(path.read_text(encoding="utf-8"))
            for rule in rs.rules.values():
                assert 0.0 <= rule.confidence <= 1.0
                assert 0.0 <= rule.decay <= 1.0

    def test_description_matches_last_version_everywhere(self):
        rs = import_rules_file(load("03_logpose.md"))
        rid = sorted(rs.rules)[0]
        rule = rs.rules[rid]
        rule.description = "changed"
        upsert_rule(rs, rule)
        for r in rs.rules.values():
            assert r.description == r.versions[-1].text

    def test_roundtrip_through_dict(self):
        from zoro.rules import RuleSet

        rs = import_rules_file(load("03_logpose.md"))
        again = RuleSet.from_dict(rs.to_dict())
        assert again == rs
        assert again.content_hash() == rs.content_hash()
