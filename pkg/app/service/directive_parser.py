import logging
import re
from dataclasses import dataclass
from pathlib import Path

from app.core.exceptions import (
    EmptyEntityError,
    ParseError,
    TemplateMismatchError,
    UndecomposableError,
    UnknownRelationError,
)
from app.entity.directive import (
    Directive,
    DirectiveScript,
    EditingDirective,
    Entity,
    ErasingDirective,
    Relation,
    RelationKind,
    SynthesisDirective,
)

logger = logging.getLogger(__name__)

DEFAULT_LEXICON = Path(__file__).resolve().parent.parent / "data" / "relations.txt"

ARTICLES = frozenset({"a", "an", "the", "some"})
SYNTHESIS_KEYWORDS = ("add", "put", "place", "draw", "insert")
EDITING_KEYWORDS = ("change", "turn", "replace")
ERASING_KEYWORDS = ("delete", "remove", "erase")
CLAUSE_KEYWORDS = SYNTHESIS_KEYWORDS + EDITING_KEYWORDS + ERASING_KEYWORDS
# words that can never be part of a single entity phrase
NON_ENTITY_WORDS = frozenset({"and", "or", "then", "between", "with", "of", "to", "into", "in", "on", "at", "by"})
MAX_ENTITY_WORDS = 4

_EDITING = re.compile(r"^(?:change|turn|replace)\s+(?P<source>.+?)\s+(?:to|into|with)\s+(?P<target>.+)$")
_ERASING = re.compile(r"^(?:delete|remove|erase)\s+(?P<target>.+)$")
_SYNTHESIS_PREFIX = re.compile(r"^(?:add|put|place|draw|insert)\s+")
_WORD = re.compile(r"^[a-z][a-z'-]*$")
_SENTENCE_SPLIT = re.compile(r"[.;!?\n]+")
_THEN_SPLIT = re.compile(r"\s*,?\s*\b(?:and\s+)?then\b\s*,?\s*")
_AND_SPLIT = re.compile(r"\s*,?\s+and\s+(?=(?:" + "|".join(CLAUSE_KEYWORDS) + r")\b)")
_SCRIPT_ADD_REL = re.compile(r"^rel=(?P<lexeme>.+?)\s+partner=(?P<entity>.+)$")
_SCRIPT_ADD_POS = re.compile(r"^pos=(?P<lexeme>.+?)\s+anchor=(?P<entity>.+)$")


def _normalize(text: str) -> str:
    text = text.strip().lower()
    text = re.sub(r"[,.;:!?\"]+$", "", text)
    return re.sub(r"\s+", " ", text).strip()


def singularize(word: str) -> str:
    """Strip a plural suffix from a noun; idempotent on its own output."""
    if len(word) > 3 and word.endswith("ies"):  # noqa: PLR2004
        return word[:-3] + "y"
    if word.endswith(("ches", "shes", "xes", "sses", "zzes")):
        return word[:-2]
    if len(word) > 3 and word.endswith("oes"):  # noqa: PLR2004
        return word[:-2]
    if len(word) > 2 and word.endswith("s") and not word.endswith(("ss", "us", "is")):  # noqa: PLR2004
        return word[:-1]
    return word


@dataclass(frozen=True)
class _Surface:
    text: str
    relation: Relation
    pattern: re.Pattern[str]


class RelationLexicon:
    """
    Registered relation phrases.

    Each entry has a canonical lexeme and surface forms; lookups map any surface form to the canonical
    `Relation`. The lexicon is read from a data file of `<kind> <lexeme> [| <surface> ...]` lines.
    """

    def __init__(self, entries: dict[str, tuple[Relation, list[str]]]) -> None:
        """
        Initialize RelationLexicon.

        Args:
            entries (dict[str, tuple[Relation, list[str]]]): canonical lexeme -> (relation, extra surface forms).
        """
        self.relations = {lexeme: relation for lexeme, (relation, _) in entries.items()}
        surfaces: list[_Surface] = []
        for lexeme, (relation, aliases) in entries.items():
            for text in (lexeme, *aliases):
                pattern = re.compile(r"(?<![a-z])" + re.escape(text) + r"(?![a-z])")
                surfaces.append(_Surface(text, relation, pattern))
        self._surfaces = sorted(surfaces, key=lambda s: len(s.text), reverse=True)

    @classmethod
    def load(cls, path: Path = DEFAULT_LEXICON) -> "RelationLexicon":
        """
        Read a lexicon data file.

        Raises:
            ParseError: If a line is malformed.

        Returns:
            RelationLexicon: The lexicon.
        """
        entries: dict[str, tuple[Relation, list[str]]] = {}
        for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            kind_text, _, rest = line.partition(" ")
            forms = [_normalize(f) for f in rest.split("|")]
            try:
                kind = RelationKind(kind_text.upper())
            except ValueError as exc:
                msg = f"unknown relation kind '{kind_text}'"
                raise ParseError(msg, line_no=line_no) from exc
            if not forms or not forms[0]:
                raise ParseError("missing lexeme", line_no=line_no)
            entries[forms[0]] = (Relation(kind, forms[0]), [f for f in forms[1:] if f])
        return cls(entries)

    def lookup(self, lexeme: str) -> Relation:
        """
        Canonical relation of a lexeme or surface form.

        Raises:
            UnknownRelationError: If the phrase is not registered.

        Returns:
            Relation: The canonical relation.
        """
        text = _normalize(lexeme)
        for surface in self._surfaces:
            if surface.text == text:
                return surface.relation
        msg = f"Relation '{lexeme}' is not in the lexicon"
        raise UnknownRelationError(msg)

    def find(self, text: str, kind: RelationKind) -> list[tuple[int, int, Relation]]:
        """Non-overlapping (start, end, relation) matches of `kind`, longest surface forms first."""
        taken: list[tuple[int, int, Relation]] = []
        for surface in self._surfaces:
            if surface.relation.kind is not kind:
                continue
            for match in surface.pattern.finditer(text):
                start, end = match.span()
                if all(end <= s or start >= e for s, e, _ in taken):
                    taken.append((start, end, surface.relation))
        return sorted(taken, key=lambda m: m[0])


class DirectiveParser:
    """
    Deterministic decomposer of restricted-English scene descriptions.

    Clauses are matched against the three structured-prompt templates:
    "[object 1] [relation] [object 2] [position] [object 3]" (synthesis),
    "change [object 1] to [object 2]" (editing) and "delete [object]" (erasing).
    """

    def __init__(self, lexicon: RelationLexicon | None = None) -> None:
        """
        Initialize DirectiveParser.

        Args:
            lexicon (RelationLexicon | None): Relation lexicon. The bundled data file when None.
        """
        self.lexicon = lexicon or RelationLexicon.load()

    def parse_entity(self, phrase: str, slot: str = "entity") -> Entity:
        """
        Parse "[article] adjective* noun" into an Entity.

        Raises:
            EmptyEntityError: If nothing but articles is left.
            TemplateMismatchError: If the phrase is not a single entity.

        Returns:
            Entity: Canonical entity; the noun is singularized.
        """
        words = _normalize(phrase).split()
        while words and words[0] in ARTICLES:
            words = words[1:]
        if not words:
            msg = f"Empty {slot}"
            raise EmptyEntityError(msg)
        if len(words) > MAX_ENTITY_WORDS or any(w in NON_ENTITY_WORDS or not _WORD.match(w) for w in words):
            msg = f"'{phrase.strip()}' is not a single {slot}"
            raise TemplateMismatchError(msg)
        return Entity(name=singularize(words[-1]), attributes=tuple(words[:-1]))

    def _parse_synthesis(self, body: str) -> SynthesisDirective:
        position: Relation | None = None
        anchor: Entity | None = None

        spatial = self.lexicon.find(body, RelationKind.SPATIAL)
        if len(spatial) > 1:
            raise TemplateMismatchError("More than one position phrase in a clause")
        if spatial:
            start, end, position = spatial[0]
            anchor = self.parse_entity(body[end:], "anchor")
            body = body[:start].strip()

        interactional = self.lexicon.find(body, RelationKind.INTERACTIONAL)
        if len(interactional) > 1:
            raise TemplateMismatchError("More than one relation phrase in a clause")
        if not interactional:
            return SynthesisDirective(subject=self.parse_entity(body, "subject"), position=position, anchor=anchor)

        start, end, relation = interactional[0]
        left, right = body[:start].strip(), body[end:].strip()
        if not right and " and " in f" {left} ":
            left, _, right = left.partition(" and ")
        subject = self.parse_entity(left, "subject")
        partner = self.parse_entity(right, "partner")
        return SynthesisDirective(subject=subject, relation=relation, partner=partner, position=position, anchor=anchor)

    def parse_directive(self, text: str) -> Directive:
        """
        Parse a single clause.

        Mode keywords are checked first: "change ... to ..." is editing, "delete ..."/"remove ..." is
        erasing, anything else is slot-filled into the synthesis template.

        Args:
            text (str): One clause.

        Raises:
            TemplateMismatchError: If no template matches.
            EmptyEntityError: If a required slot is empty.

        Returns:
            Directive: The parsed directive.
        """
        clause = _normalize(text)
        if not clause:
            raise EmptyEntityError("Empty clause")

        if clause.split()[0] in EDITING_KEYWORDS:
            match = _EDITING.match(clause)
            if not match:
                raise TemplateMismatchError(f"'{text.strip()}' does not match 'change [object] to [object]'")
            source = self.parse_entity(match["source"], "source")
            target = self.parse_entity(match["target"], "target")
            if source.name == target.name:
                raise TemplateMismatchError("Editing source and target are the same entity")
            return EditingDirective(source=source, target=target)

        match = _ERASING.match(clause)
        if match:
            return ErasingDirective(target=self.parse_entity(match["target"], "target"))

        return self._parse_synthesis(_SYNTHESIS_PREFIX.sub("", clause))

    def split_clauses(self, full_text: str) -> list[str]:
        """Split on sentence punctuation, "then"/"and then", and "and" followed by a mode keyword."""
        clauses: list[str] = []
        for sentence in _SENTENCE_SPLIT.split(full_text.lower()):
            for part in _THEN_SPLIT.split(sentence):
                clauses.extend(c.strip(" ,") for c in _AND_SPLIT.split(part))
        return [c for c in clauses if c]

    def decompose(self, full_text: str) -> DirectiveScript:
        """
        Decompose a description into an ordered directive script.

        Raises:
            UndecomposableError: If the text has a single clause that matches no template.
            TemplateMismatchError: If one of several clauses matches no template (carries the clause index).
            EmptyEntityError: If a slot of some clause is empty.

        Returns:
            DirectiveScript: One directive per clause, in clause order.
        """
        if not full_text.strip():
            raise UndecomposableError("Empty description")

        clauses = self.split_clauses(full_text)
        directives: list[Directive] = []
        for index, clause in enumerate(clauses):
            try:
                directives.append(self.parse_directive(clause))
            except TemplateMismatchError as exc:
                if len(clauses) == 1:
                    msg = f"Cannot decompose '{full_text.strip()}': {exc}"
                    raise UndecomposableError(msg) from exc
                raise type(exc)(str(exc), clause_index=index) from exc

        logger.debug("Decomposed %d clauses", len(directives))
        return DirectiveScript(directives=directives, source_text=full_text)

    @staticmethod
    def render(directive: Directive) -> str:
        """Print a directive with its template; parsing the result yields the same directive."""
        match directive:
            case EditingDirective():
                return f"change {directive.source.render()} to {directive.target.render()}"
            case ErasingDirective():
                return f"delete {directive.target.render()}"
            case SynthesisDirective():
                if directive.relation and directive.partner:
                    if directive.relation.lexeme == "play together":
                        parts = [f"{directive.subject.render()} and {directive.partner.render()} play together"]
                    else:
                        parts = [directive.subject.render(), directive.relation.lexeme, directive.partner.render()]
                else:
                    parts = [directive.subject.render()]
                if directive.position and directive.anchor:
                    parts += [directive.position.lexeme, directive.anchor.render()]
                return "add " + " ".join(parts)
        msg = f"Unsupported directive {directive!r}"
        raise TypeError(msg)

    def render_script(self, script: DirectiveScript) -> str:
        """Render a whole script as one description, clauses joined by ". then "."""
        return ". then ".join(self.render(d) for d in script.directives)

    def _script_line(self, line: str, line_no: int) -> Directive:
        keyword, sep, rest = line.partition(":")
        rest = rest.strip()
        if not sep or not rest:
            raise ParseError("expected '<add|edit|erase>: ...'", line_no=line_no)
        try:
            match keyword.strip():
                case "edit":
                    source, arrow, target = rest.partition("->")
                    if not arrow:
                        raise ParseError("edit needs '<source> -> <target>'", line_no=line_no)
                    return EditingDirective(self.parse_entity(source, "source"), self.parse_entity(target, "target"))
                case "erase":
                    return ErasingDirective(self.parse_entity(rest, "target"))
                case "add":
                    return self._script_add(rest, line_no)
        except (TemplateMismatchError, UnknownRelationError, ValueError) as exc:
            raise ParseError(str(exc), line_no=line_no) from exc
        msg = f"unknown directive keyword '{keyword.strip()}'"
        raise ParseError(msg, line_no=line_no)

    def _script_add(self, rest: str, line_no: int) -> SynthesisDirective:
        fields = [f.strip() for f in rest.split("|")]
        subject = self.parse_entity(fields[0], "subject")
        relation = partner = position = anchor = None
        for field in fields[1:]:
            if match := _SCRIPT_ADD_REL.match(field):
                relation = self.lexicon.lookup(match["lexeme"])
                partner = self.parse_entity(match["entity"], "partner")
                if relation.kind is not RelationKind.INTERACTIONAL:
                    raise ParseError("rel= needs an interactional lexeme", line_no=line_no)
            elif match := _SCRIPT_ADD_POS.match(field):
                position = self.lexicon.lookup(match["lexeme"])
                anchor = self.parse_entity(match["entity"], "anchor")
                if position.kind is not RelationKind.SPATIAL:
                    raise ParseError("pos= needs a spatial lexeme", line_no=line_no)
            else:
                msg = f"unexpected field '{field}'"
                raise ParseError(msg, line_no=line_no)
        return SynthesisDirective(subject, relation, partner, position, anchor)

    def load_script(self, path: Path) -> DirectiveScript:
        """
        Read a directive script file.

        Raises:
            ParseError: If the file is unreadable, empty or has a malformed line (with its line number).

        Returns:
            DirectiveScript: The script.
        """
        try:
            text = path.read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            msg = f"cannot read script '{path}'"
            raise ParseError(msg) from exc

        directives = []
        for line_no, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            directives.append(self._script_line(line, line_no))
        if not directives:
            raise ParseError("script contains no directive")
        return DirectiveScript(directives=directives)

    @staticmethod
    def dump_script(script: DirectiveScript) -> str:
        """Render a script in the directive-script file format."""
        lines = []
        for directive in script.directives:
            match directive:
                case EditingDirective():
                    lines.append(f"edit: {directive.source.render()} -> {directive.target.render()}")
                case ErasingDirective():
                    lines.append(f"erase: {directive.target.render()}")
                case SynthesisDirective():
                    line = f"add: {directive.subject.render()}"
                    if directive.relation and directive.partner:
                        line += f" | rel={directive.relation.lexeme} partner={directive.partner.render()}"
                    if directive.position and directive.anchor:
                        line += f" | pos={directive.position.lexeme} anchor={directive.anchor.render()}"
                    lines.append(line)
        return "\n".join(lines) + "\n"

    def save_script(self, script: DirectiveScript, path: Path) -> None:
        """Write a directive script file."""
        path.write_text(self.dump_script(script), encoding="utf-8")
