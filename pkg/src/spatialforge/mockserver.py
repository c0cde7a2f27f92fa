"""Reference mock services for offline runs and wiring tests.

Implements the three wire formats the HTTP gateway speaks (chat,
embedding, image-text similarity) with fully deterministic responses, so
integration tests need no real model behind them.
"""

from __future__ import annotations

import hashlib
import math

from fastapi import FastAPI
from pydantic import BaseModel

EMBED_DIM = 16

# Chat prompts containing this marker get a "No" spatial verdict.
NONSPATIAL_MARKER = "plain scene with nothing placed anywhere"

_CANNED_PAIRS = (
    '[{"question": "Where is the main subject located?", "answer": "on the left"},'
    ' {"question": "What is directly above the subject?", "answer": "a shelf"},'
    ' {"question": "Is anything behind the subject?", "answer": "yes, a wall"}]'
)


def deterministic_embedding(text: str, dim: int = EMBED_DIM) -> list[float]:
    """Unit vector derived from the text digest; equal texts embed equally."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    raw = []
    for i in range(dim):
        chunk = digest[(2 * i) % len(digest) : (2 * i) % len(digest) + 2]
        raw.append(int.from_bytes(chunk, "big") / 65535.0 - 0.5)
    norm = math.sqrt(sum(x * x for x in raw)) or 1.0
    return [x / norm for x in raw]


def deterministic_cosine(image_uri: str, text: str) -> float:
    digest = hashlib.sha256(f"{image_uri}\x00{text}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "big") / 0xFFFFFFFF


class ChatBody(BaseModel):
    model: str = ""
    messages: list[dict]
    temperature: float = 0.0
    max_tokens: int = 0


class EmbedBody(BaseModel):
    model: str = ""
    input: list[str]


class SimilarityBody(BaseModel):
    image_uri: str
    text: str


def create_app() -> FastAPI:
    app = FastAPI(title="mock-models", docs_url=None, redoc_url=None)

    @app.post("/chat")
    def chat(body: ChatBody) -> dict:
        prompt = body.messages[-1]["content"] if body.messages else ""
        if prompt.startswith("Generate a JSON list"):
            text = _CANNED_PAIRS
        elif prompt.startswith("Determine if"):
            text = "No." if NONSPATIAL_MARKER in prompt else "Yes."
        else:
            text = "OK"
        return {
            "choices": [
                {"message": {"role": "assistant", "content": text}, "finish_reason": "stop"}
            ]
        }

    @app.post("/embed")
    def embed(body: EmbedBody) -> dict:
        return {
            "data": [
                {"index": i, "embedding": deterministic_embedding(text)}
                for i, text in enumerate(body.input)
            ]
        }

    @app.post("/similarity")
    def similarity(body: SimilarityBody) -> dict:
        return {"cosine": deterministic_cosine(body.image_uri, body.text)}

    return app
