"""
NIF stand-off annotation documents and their turtle serialisation.

A document is one ``nif:Context`` (the full text) plus entity annotations
anchored by code-point offsets into that text. Parsing goes through rdflib's
turtle parser; serialisation is written out directly so the output order is
stable (context first, annotations sorted by offsets and class).
"""

from __future__ import annotations

from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace

from rdflib import RDF, XSD, Graph, Literal, Namespace, URIRef

from .errors import ContextMismatchError, ModelError, OffsetError, ParseError
from .reports import ValidationReport

NIF = Namespace("http://persistence.uni-leipzig.org/nlp2rdf/ontologies/nif-core#")
ITSRDF = Namespace("http://www.w3.org/2005/11/its/rdf#")

MEDIA_TYPE = "text/turtle"

_PREFIXES = (
    f"@prefix nif: <{NIF}> .\n"
    f"@prefix itsrdf: <{ITSRDF}> .\n"
    f"@prefix xsd: <{XSD}> .\n"
    f"@prefix rdf: <{RDF}> .\n"
)


@dataclass(frozen=True)
class Annotation:
    begin_index: int
    end_index: int
    anchor_of: str
    entity_class: str
    ident_ref: str | None = None

    @property
    def key(self) -> tuple[int, int, str, str | None]:
        """Identity tuple used for deduplication."""
        return (self.begin_index, self.end_index, self.entity_class, self.ident_ref)

    @property
    def sort_key(self) -> tuple[int, int, str, str]:
        return (self.begin_index, self.end_index, self.entity_class, self.ident_ref or "")


@dataclass(frozen=True)
class NifDocument:
    base_uri: str
    context_text: str
    begin_index: int = 0
    end_index: int = 0
    annotations: tuple[Annotation, ...] = field(default_factory=tuple)

    @property
    def context_uri(self) -> str:
        return f"{self.base_uri}#char={self.begin_index},{self.end_index}"

    def annotation_keys(self) -> set[tuple[int, int, str, str | None]]:
        return {a.key for a in self.annotations}


def _canonical(annotations: Iterable[Annotation]) -> tuple[Annotation, ...]:
    unique = {a.key: a for a in annotations}
    return tuple(sorted(unique.values(), key=lambda a: a.sort_key))


def make_context(text: str, base_uri: str) -> NifDocument:
    return NifDocument(base_uri=base_uri, context_text=text, begin_index=0, end_index=len(text))


def annotate(
    doc: NifDocument,
    begin: int,
    end: int,
    entity_class: str,
    ident_ref: str | None = None,
) -> NifDocument:
    """Return a copy of ``doc`` with one more annotation; identical tuples are not duplicated."""

    if not 0 <= begin < end <= doc.end_index:
        raise OffsetError(
            f"annotation offsets [{begin},{end}) outside context [0,{doc.end_index})",
            payload={"begin": begin, "end": end, "contextEnd": doc.end_index},
        )
    added = Annotation(
        begin_index=begin,
        end_index=end,
        anchor_of=doc.context_text[begin:end],
        entity_class=entity_class,
        ident_ref=ident_ref,
    )
    return replace(doc, annotations=_canonical((*doc.annotations, added)))


# --- turtle ---------------------------------------------------------------


def _int_value(graph: Graph, subject: URIRef, predicate: URIRef) -> int:
    value = graph.value(subject, predicate)
    if value is None:
        raise ModelError(f"{subject} lacks {predicate}")
    try:
        return int(str(value))
    except ValueError as exc:
        raise ModelError(f"{subject} has non-integer {predicate}: {value!s}") from exc


def parse_nif(text: str | bytes) -> NifDocument:
    """Parse a turtle NIF document with exactly one context."""

    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError("NIF documents must be UTF-8 encoded") from exc

    graph = Graph()
    try:
        # Prefixes are predeclared so documents that omit them still parse.
        graph.parse(data=_PREFIXES + text, format="turtle")
    except (SyntaxError, ValueError) as exc:
        raise ParseError(f"Invalid turtle: {exc}") from exc

    contexts = sorted(set(graph.subjects(RDF.type, NIF.Context)))
    if len(contexts) != 1:
        raise ModelError(f"expected exactly one nif:Context, found {len(contexts)}")
    context = contexts[0]

    is_string = graph.value(context, NIF.isString)
    if is_string is None:
        raise ModelError("context lacks nif:isString")
    context_text = str(is_string)
    begin = _int_value(graph, context, NIF.beginIndex)
    end = _int_value(graph, context, NIF.endIndex)
    if end - begin != len(context_text):
        raise ModelError(
            f"context offsets [{begin},{end}) do not match text length {len(context_text)}"
        )
    base_uri = str(context).split("#", 1)[0]

    annotations: list[Annotation] = []
    for subject in sorted(set(graph.subjects(NIF.referenceContext, None))):
        reference = graph.value(subject, NIF.referenceContext)
        if reference != context:
            raise ModelError(f"{subject} references unknown context {reference}")
        a_begin = _int_value(graph, subject, NIF.beginIndex)
        a_end = _int_value(graph, subject, NIF.endIndex)
        if not 0 <= a_begin < a_end <= end:
            raise ModelError(f"{subject} offsets [{a_begin},{a_end}) out of range")
        anchor = graph.value(subject, NIF.anchorOf)
        expected = context_text[a_begin:a_end]
        if anchor is None or str(anchor) != expected:
            raise ModelError(
                f"{subject} anchorOf {str(anchor)!r} does not match context substring {expected!r}"
            )
        entities = sorted(str(e) for e in graph.objects(subject, NIF.entity))
        if not entities:
            raise ModelError(f"{subject} lacks nif:entity")
        idents: list[str | None] = sorted(str(i) for i in graph.objects(subject, ITSRDF.taIdentRef))
        for entity in entities:
            for ident in idents or [None]:
                annotations.append(Annotation(a_begin, a_end, expected, entity, ident))

    return NifDocument(
        base_uri=base_uri,
        context_text=context_text,
        begin_index=begin,
        end_index=end,
        annotations=_canonical(annotations),
    )


def serialize_nif(doc: NifDocument) -> str:
    """Deterministic turtle rendering of ``doc``."""

    namespaces = Graph()
    namespaces.bind("nif", NIF)
    namespaces.bind("itsrdf", ITSRDF)
    namespaces.bind("xsd", XSD)
    manager = namespaces.namespace_manager

    def number(value: int) -> str:
        return Literal(str(value), datatype=XSD.nonNegativeInteger).n3(manager)

    def string(value: str) -> str:
        return Literal(value, datatype=XSD.string).n3(manager)

    context = URIRef(doc.context_uri).n3()
    blocks = [
        "\n".join(
            [
                context,
                "    a nif:RFC5147String , nif:String , nif:Context ;",
                f"    nif:beginIndex {number(doc.begin_index)} ;",
                f"    nif:endIndex {number(doc.end_index)} ;",
                f"    nif:isString {string(doc.context_text)} .",
            ]
        )
    ]

    seen_spans: Counter[tuple[int, int]] = Counter()
    for annotation in sorted(doc.annotations, key=lambda a: a.sort_key):
        span = (annotation.begin_index, annotation.end_index)
        seen_spans[span] += 1
        subject = f"{doc.base_uri}#char={span[0]},{span[1]}"
        if seen_spans[span] > 1:
            # Several annotations over one span need distinct subjects.
            subject += f";n={seen_spans[span]}"
        lines = [
            URIRef(subject).n3(),
            "    a nif:RFC5147String , nif:String ;",
            f"    nif:anchorOf {string(annotation.anchor_of)} ;",
            f"    nif:beginIndex {number(annotation.begin_index)} ;",
            f"    nif:endIndex {number(annotation.end_index)} ;",
            f"    nif:entity {URIRef(annotation.entity_class).n3()} ;",
        ]
        if annotation.ident_ref:
            lines.append(f"    nif:referenceContext {context} ;")
            lines.append(f"    itsrdf:taIdentRef {URIRef(annotation.ident_ref).n3()} .")
        else:
            lines.append(f"    nif:referenceContext {context} .")
        blocks.append("\n".join(lines))

    header = "\n".join(
        [
            f"@prefix nif: <{NIF}> .",
            f"@prefix itsrdf: <{ITSRDF}> .",
            f"@prefix xsd: <{XSD}> .",
        ]
    )
    return header + "\n\n" + "\n\n".join(blocks) + "\n"


def merge(docs: Sequence[NifDocument]) -> NifDocument:
    """Union of the annotation sets of documents over the same context."""

    if not docs:
        raise ValueError("merge needs at least one document")
    first = docs[0]
    for other in docs[1:]:
        if other.context_text != first.context_text or other.base_uri != first.base_uri:
            raise ContextMismatchError(
                "cannot merge NIF documents with different contexts",
                payload={"expected": first.context_uri, "found": other.context_uri},
            )
    return replace(first, annotations=_canonical(a for doc in docs for a in doc.annotations))


def validate_doc(doc: NifDocument) -> ValidationReport:
    report = ValidationReport()
    if not doc.base_uri:
        report.error("baseUri", "base URI is empty")
    elif "#" in doc.base_uri:
        report.error("baseUri", "base URI must not contain a fragment")
    if doc.begin_index < 0:
        report.error("beginIndex", "beginIndex is negative")
    if doc.end_index - doc.begin_index != len(doc.context_text):
        report.error(
            "endIndex",
            f"endIndex - beginIndex = {doc.end_index - doc.begin_index}, "
            f"text has {len(doc.context_text)} code points",
        )
    for index, annotation in enumerate(doc.annotations):
        path = f"annotations[{index}]"
        if annotation.begin_index < 0:
            report.error(f"{path}.beginIndex", "beginIndex is negative")
        if annotation.begin_index >= annotation.end_index:
            report.error(f"{path}.endIndex", "endIndex must be greater than beginIndex")
        if annotation.end_index > doc.end_index:
            report.error(f"{path}.endIndex", "endIndex beyond the end of the context")
        expected = doc.context_text[max(annotation.begin_index, 0) : annotation.end_index]
        if annotation.anchor_of != expected:
            report.error(
                f"{path}.anchorOf",
                f"anchorOf {annotation.anchor_of!r} differs from context substring {expected!r}",
            )
        if not annotation.entity_class:
            report.error(f"{path}.entityClass", "entity class is empty")
    return report
