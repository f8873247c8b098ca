from __future__ import annotations

import random
from dataclasses import replace

import pytest

from conftest import GEONAMES_PARIS, GND_MONTEUX, LOC, PER, SENTENCE, fixture_text
from workflow_runtime.errors import ContextMismatchError, ModelError, OffsetError, ParseError
from workflow_runtime.nif import (
    Annotation,
    NifDocument,
    annotate,
    make_context,
    merge,
    parse_nif,
    serialize_nif,
    validate_doc,
)

BASE = "http://dkt.dfki.de/documents/"
CLASSES = [PER, LOC, "http://dkt.dfki.de/ontologies/nif#ORG"]
IDENTS = [None, GND_MONTEUX, GEONAMES_PARIS]
ALPHABET = "abcdefgh ijkéü中\"'\\\n\t."


def random_document(rng: random.Random, index: int = 0) -> NifDocument:
    text = "".join(rng.choice(ALPHABET) for _ in range(rng.randint(1, 40)))
    doc = make_context(text, f"http://example.org/doc/{index}/")
    for _ in range(rng.randint(0, 6)):
        begin = rng.randrange(len(text))
        end = rng.randint(begin + 1, len(text))
        doc = annotate(doc, begin, end, rng.choice(CLASSES), rng.choice(IDENTS))
    return doc


def test_annotated_document_parses():
    doc = parse_nif(fixture_text("monteux_paris.ttl"))

    assert doc.context_text == SENTENCE
    assert len(doc.context_text) == 25
    assert doc.base_uri == BASE
    assert doc.annotation_keys() == {
        (0, 7, PER, GND_MONTEUX),
        (20, 25, LOC, GEONAMES_PARIS),
    }
    assert [a.anchor_of for a in doc.annotations] == ["Monteux", "Paris"]


def test_annotated_document_round_trips():
    doc = parse_nif(fixture_text("monteux_paris.ttl"))

    assert parse_nif(serialize_nif(doc)) == doc


def test_serialisation_is_deterministic():
    doc = parse_nif(fixture_text("monteux_paris.ttl"))
    shuffled = replace(doc, annotations=tuple(reversed(doc.annotations)))

    assert serialize_nif(doc) == serialize_nif(shuffled)
    assert serialize_nif(doc).index("#char=0,7") < serialize_nif(doc).index("#char=20,25")


def test_make_context_has_no_annotations():
    doc = make_context(SENTENCE, BASE)

    assert (doc.begin_index, doc.end_index) == (0, 25)
    assert doc.annotations == ()
    assert doc.context_uri == BASE + "#char=0,25"
    assert parse_nif(serialize_nif(doc)) == doc


def test_annotate_fills_anchor_and_deduplicates():
    doc = make_context(SENTENCE, BASE)
    doc = annotate(doc, 20, 25, LOC, GEONAMES_PARIS)
    again = annotate(doc, 20, 25, LOC, GEONAMES_PARIS)

    assert doc.annotations[0].anchor_of == "Paris"
    assert again == doc


@pytest.mark.parametrize(("begin", "end"), [(-1, 3), (3, 3), (5, 2), (20, 26)])
def test_annotate_rejects_bad_offsets(begin, end):
    with pytest.raises(OffsetError):
        annotate(make_context(SENTENCE, BASE), begin, end, PER)


def test_several_annotations_on_one_span_round_trip():
    doc = make_context(SENTENCE, BASE)
    doc = annotate(doc, 0, 7, PER, GND_MONTEUX)
    doc = annotate(doc, 0, 7, PER, "http://www.wikidata.org/entity/Q380440")
    doc = annotate(doc, 0, 7, CLASSES[2])

    text = serialize_nif(doc)

    assert ";n=2" in text and ";n=3" in text
    assert parse_nif(text) == doc


def test_invalid_turtle_is_parse_error():
    with pytest.raises(ParseError):
        parse_nif("<http://x> nif:isString ")


def test_anchor_mismatch_is_model_error():
    broken = fixture_text("monteux_paris.ttl").replace('"Paris"^^xsd:string', '"Lyon"^^xsd:string')

    with pytest.raises(ModelError):
        parse_nif(broken)


def test_two_contexts_are_rejected():
    other = serialize_nif(make_context("other text", "http://example.org/other/"))
    body = other.split("\n\n", 1)[1]

    with pytest.raises(ModelError):
        parse_nif(fixture_text("monteux_paris.ttl") + "\n" + body)


def test_context_length_must_match_offsets():
    broken = fixture_text("monteux_paris.ttl").replace(
        'nif:endIndex           "25"^^xsd:nonNegativeInteger ;\n nif:isString',
        'nif:endIndex           "24"^^xsd:nonNegativeInteger ;\n nif:isString',
    )

    with pytest.raises(ModelError):
        parse_nif(broken)


def test_validate_doc_reports_paths():
    doc = make_context(SENTENCE, BASE)
    bad = replace(doc, annotations=(Annotation(0, 7, "Mozart", PER),))

    report = validate_doc(bad)

    assert not report.ok
    assert [f.path for f in report.errors()] == ["annotations[0].anchorOf"]
    assert validate_doc(parse_nif(fixture_text("monteux_paris.ttl"))).ok


def test_merge_of_ner_and_geo_branches():
    ner = annotate(make_context(SENTENCE, BASE), 0, 7, PER, GND_MONTEUX)
    geo = annotate(make_context(SENTENCE, BASE), 20, 25, LOC, GEONAMES_PARIS)

    merged = merge([ner, geo])

    assert merged == parse_nif(fixture_text("monteux_paris.ttl"))


def test_merge_rejects_different_contexts():
    with pytest.raises(ContextMismatchError):
        merge([make_context(SENTENCE, BASE), make_context("Paris", BASE)])


def test_random_documents_round_trip():
    rng = random.Random(1234)
    for index in range(1000):
        doc = random_document(rng, index)
        assert parse_nif(serialize_nif(doc)) == doc
        assert validate_doc(doc).ok


def test_merge_matches_set_union():
    rng = random.Random(99)
    for _ in range(200):
        seed = random_document(rng)
        empty = replace(seed, annotations=())

        def variant() -> NifDocument:
            doc = empty
            for _ in range(rng.randint(0, 4)):
                begin = rng.randrange(len(doc.context_text))
                end = rng.randint(begin + 1, len(doc.context_text))
                doc = annotate(doc, begin, end, rng.choice(CLASSES), rng.choice(IDENTS))
            return doc

        a, b, c = variant(), variant(), variant()
        oracle = a.annotation_keys() | b.annotation_keys() | c.annotation_keys()

        assert merge([a, b, c]).annotation_keys() == oracle
        assert merge([a, b]) == merge([b, a])
        assert merge([merge([a, b]), c]) == merge([a, merge([b, c])])
        assert merge([a, empty]) == a
