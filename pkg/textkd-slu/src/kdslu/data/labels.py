"""Intent label space and flat-index codec."""

from dataclasses import dataclass
from typing import Iterator

from kdslu.exceptions import LabelError


@dataclass(frozen=True)
class IntentTriple:
    """(action, object, location) intent label."""

    action: int
    object: int
    location: int


@dataclass(frozen=True)
class LabelSpace:
    """Cartesian product of action, object and location values."""

    num_actions: int
    num_objects: int
    num_locations: int

    @property
    def size(self) -> int:
        return self.num_actions * self.num_objects * self.num_locations

    def contains(self, triple: IntentTriple) -> bool:
        return (
            0 <= triple.action < self.num_actions
            and 0 <= triple.object < self.num_objects
            and 0 <= triple.location < self.num_locations
        )

    def triples(self) -> Iterator[IntentTriple]:
        for index in range(self.size):
            yield label_decode(index, self)


FSC_LABELS = LabelSpace(6, 14, 4)
TOY_LABELS = LabelSpace(4, 3, 2)


def label_encode(triple: IntentTriple, space: LabelSpace = FSC_LABELS) -> int:
    """
    Flat index action * (O * L) + object * L + location.

    Raises:
        LabelError: If a component is out of range.
    """
    if not space.contains(triple):
        raise LabelError(f"{triple} is outside the label space {space}")
    return (triple.action * space.num_objects + triple.object) * space.num_locations + triple.location


def label_decode(index: int, space: LabelSpace = FSC_LABELS) -> IntentTriple:
    """
    Inverse of label_encode.

    Raises:
        LabelError: If index is outside [0, space.size).
    """
    if not 0 <= index < space.size:
        raise LabelError(f"Label index {index} is outside [0, {space.size})")
    rest, location = divmod(index, space.num_locations)
    action, obj = divmod(rest, space.num_objects)
    return IntentTriple(action, obj, location)
