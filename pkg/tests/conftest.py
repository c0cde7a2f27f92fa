"""Shared builders for records, pairs, and scripted gateways."""

from __future__ import annotations

import math

import pytest

from spatialforge.corpus import IMAGE_OK, SPATIAL_OK, CaptionRecord, SourceKind
from spatialforge.gateway import FunctionGateway
from spatialforge.generation import QAPair


def make_record(
    rid: str,
    description: str = "A red cup sits on the wooden table near the window.",
    source: SourceKind = SourceKind.CUSTOM,
    image_uri: str | None = None,
    flags: tuple[str, ...] = (IMAGE_OK, SPATIAL_OK),
) -> CaptionRecord:
    return CaptionRecord.make(
        id=rid,
        source=source,
        image_uri=image_uri if image_uri is not None else f"images/{rid}.jpg",
        description=description,
        flags=flags,
    )


def make_pair(record_id: str, ordinal: int, question: str, answer: str) -> QAPair:
    return QAPair.make(record_id, ordinal, question, answer)


def basis_vector(index: int, dim: int = 8) -> list[float]:
    vec = [0.0] * dim
    vec[index % dim] = 1.0
    return vec


def blended_vector(index: int, other: int, cos_target: float, dim: int = 8) -> list[float]:
    """Unit vector whose cosine with basis_vector(index) equals cos_target."""
    vec = [0.0] * dim
    vec[index % dim] = cos_target
    vec[other % dim] = math.sqrt(max(0.0, 1.0 - cos_target * cos_target))
    return vec


@pytest.fixture
def all_pass_gateway() -> FunctionGateway:
    """Chat says yes, embeddings are question-unique, similarity is high."""
    vocab: dict[str, int] = {}

    def embed(text: str) -> list[float]:
        if text not in vocab:
            vocab[text] = len(vocab)
        return basis_vector(vocab[text], dim=4096)

    return FunctionGateway(
        chat=lambda prompt: "Yes.",
        embed=embed,
        similarity=lambda uri, text: 1.0,
    )
