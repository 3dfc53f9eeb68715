from __future__ import annotations

from dataclasses import dataclass, field
from enum import StrEnum, unique


@unique
class DirectiveMode(StrEnum):
    """
    A structured prompt mode.

    Values:
        SYNTHESIS: Insert a new entity, optionally related to a partner and positioned by an anchor
        EDITING: Turn one existing entity into another
        ERASING: Remove an existing entity
    """

    SYNTHESIS = "SYNTHESIS"
    EDITING = "EDITING"
    ERASING = "ERASING"


@unique
class RelationKind(StrEnum):
    """
    A relation lexicon category.

    Values:
        SPATIAL: Positional relation resolved against an anchor box
        INTERACTIONAL: Relation between two inserted entities
    """

    SPATIAL = "SPATIAL"
    INTERACTIONAL = "INTERACTIONAL"


@dataclass(frozen=True)
class Entity:
    """An entity slot: a canonical noun and its ordered adjectives."""

    name: str
    attributes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.name.strip():
            raise ValueError("Entity name must not be empty")
        if any(not a.strip() for a in self.attributes):
            raise ValueError("Entity attributes must not be blank")

    def render(self) -> str:
        """Render the entity as space-separated adjectives followed by the noun."""
        return " ".join((*self.attributes, self.name))


@dataclass(frozen=True)
class Relation:
    """A relation phrase taken from the lexicon."""

    kind: RelationKind
    lexeme: str


@dataclass(frozen=True)
class SynthesisDirective:
    """Insert `subject`, optionally interacting with `partner` and placed relative to `anchor`."""

    subject: Entity
    relation: Relation | None = None
    partner: Entity | None = None
    position: Relation | None = None
    anchor: Entity | None = None

    def __post_init__(self) -> None:
        if (self.relation is None) != (self.partner is None):
            raise ValueError("relation and partner must be given together")
        if (self.position is None) != (self.anchor is None):
            raise ValueError("position and anchor must be given together")

    @property
    def mode(self) -> DirectiveMode:
        """Directive mode."""
        return DirectiveMode.SYNTHESIS

    @property
    def inserted(self) -> list[Entity]:
        """Entities this directive adds to the scene, subject first."""
        return [self.subject] if self.partner is None else [self.subject, self.partner]


@dataclass(frozen=True)
class EditingDirective:
    """Turn `source` into `target`."""

    source: Entity
    target: Entity

    def __post_init__(self) -> None:
        if self.source.name == self.target.name:
            raise ValueError("Editing source and target must differ")

    @property
    def mode(self) -> DirectiveMode:
        """Directive mode."""
        return DirectiveMode.EDITING


@dataclass(frozen=True)
class ErasingDirective:
    """Remove `target` from the scene."""

    target: Entity

    @property
    def mode(self) -> DirectiveMode:
        """Directive mode."""
        return DirectiveMode.ERASING


Directive = SynthesisDirective | EditingDirective | ErasingDirective


@dataclass
class DirectiveScript:
    """An ordered, non-empty list of directives; order is execution order."""

    directives: list[Directive]
    source_text: str | None = None

    def __post_init__(self) -> None:
        if not self.directives:
            raise ValueError("A directive script must contain at least one directive")

    def __len__(self) -> int:
        return len(self.directives)


@dataclass
class TokenVocabulary:
    """Integer token ids assigned to entity names in order of first appearance."""

    ids: dict[str, int] = field(default_factory=dict)

    def add(self, name: str) -> int:
        """Return the id of `name`, assigning the next free id on first use."""
        if name not in self.ids:
            self.ids[name] = len(self.ids)
        return self.ids[name]

    def __getitem__(self, name: str) -> int:
        return self.ids[name]

    def name_of(self, token: int) -> str:
        """Reverse lookup of a token id."""
        for name, id_ in self.ids.items():
            if id_ == token:
                return name
        msg = f"Unknown token {token}"
        raise KeyError(msg)

    @classmethod
    def from_script(cls, script: DirectiveScript) -> TokenVocabulary:
        """Build the vocabulary of every entity a script mentions."""
        vocab = cls()
        for directive in script.directives:
            match directive:
                case SynthesisDirective():
                    for entity in (directive.subject, directive.partner, directive.anchor):
                        if entity is not None:
                            vocab.add(entity.name)
                case EditingDirective():
                    vocab.add(directive.source.name)
                    vocab.add(directive.target.name)
                case ErasingDirective():
                    vocab.add(directive.target.name)
        return vocab
