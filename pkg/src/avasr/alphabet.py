"""Label set shared by the CTC branch, the attention decoder and the LM.

Indices are contiguous: real labels come first, then blank, sos, eos.
The CTC lattice covers labels + blank (blank last); the attention decoder
and the LM emit over labels + eos (eos last).
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass(frozen=True)
class Alphabet:
    labels: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("duplicate labels")
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.labels)})

    @property
    def num_labels(self) -> int:
        return len(self.labels)

    @property
    def blank_id(self) -> int:
        return len(self.labels)

    @property
    def sos_id(self) -> int:
        return len(self.labels) + 1

    @property
    def eos_id(self) -> int:
        return len(self.labels) + 2

    @property
    def decoder_eos_slot(self) -> int:
        """Index of eos in a decoder/LM output distribution over labels + eos."""
        return len(self.labels)

    def encode(self, text: str) -> list[int]:
        try:
            return [self._index[c] for c in text]
        except KeyError as e:
            raise ValueError(f"symbol {e.args[0]!r} not in alphabet") from None

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            if not 0 <= i < len(self.labels):
                raise ValueError(f"id {i} is not a real label")
            out.append(self.labels[i])
        return "".join(out)


def default_alphabet() -> Alphabet:
    """11-symbol toy alphabet: ten letters plus space."""
    return Alphabet(tuple("abcdefghij") + (" ",))
