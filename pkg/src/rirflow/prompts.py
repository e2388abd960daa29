"""Structured-caption to natural-prompt rewriting.

A seeded template engine samples over conversational starters, writing
styles, user personas and emotional contexts, slot-filling the caption's
acoustic fields. Every generated prompt contains the space type verbatim
and a decay cue for its RT60 bucket. Long and short prompt variants are
mixed per the caller's fraction.
"""

from __future__ import annotations

import json
from importlib import resources

import numpy as np

from .text import StructuredCaption

_TABLES_CACHE: dict | None = None

_SIZE_WORDS = ("small", "tiny", "large", "grand", "huge", "big", "vast", "little")


def prompt_tables() -> dict:
    global _TABLES_CACHE
    if _TABLES_CACHE is None:
        raw = resources.files("rirflow.data").joinpath("prompt_tables.json").read_text("utf-8")
        _TABLES_CACHE = json.loads(raw)
    return _TABLES_CACHE


def _materials_phrase(materials: list[str]) -> str:
    if not materials:
        return "mixed materials"
    if len(materials) == 1:
        return materials[0]
    return ", ".join(materials[:-1]) + " and " + materials[-1]


def _rt60_phrase(caption: StructuredCaption) -> str:
    if caption.rt60_seconds is not None:
        return f"{caption.rt60_seconds:.1f} seconds of reverb"
    return f"a {caption.rt60_bucket} reverb time"


def render_prompt(caption: StructuredCaption, template: str, starter: str,
                  cue: str, emotion: str, persona: str,
                  style: str | None = None) -> str:
    """Fill one template with caption fields (the deterministic core)."""
    tables = prompt_tables()
    # skip the size adjective when the space type already leads with one
    if caption.space_type.lower().startswith(_SIZE_WORDS):
        size_adj = ""
        space_slot = caption.space_type
    else:
        size_adj = tables["size_phrases"].get(caption.size_class, caption.size_class)
        space_slot = caption.space_type
    persona_a = "an" if persona[:1].lower() in "aeiou" else "a"
    text = template.format(
        starter=starter,
        space=space_slot,
        size_adj=size_adj,
        cue=cue,
        emotion=emotion,
        persona=persona,
        persona_a=persona_a,
        materials=_materials_phrase(caption.main_materials),
        soft=caption.soft_coverage,
        rt60_phrase=_rt60_phrase(caption),
    )
    text = " ".join(text.split())  # collapse doubled spaces from empty slots
    if style is not None:
        text += f" - keep the overall feel {style}"
    return text


def synthesize_prompts(caption: StructuredCaption, n: int, seed: int,
                       long_frac: float = 0.6) -> list[str]:
    """Generate ``n`` distinct natural-language prompts for a caption.

    Sampling over starter x style x persona x emotion x template is seeded
    and deterministic; duplicates are rejected and resampled.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    tables = prompt_tables()
    rng = np.random.default_rng(seed)
    cues = tables["bucket_cues"][caption.rt60_bucket]
    prompts: list[str] = []
    seen: set[str] = set()
    attempts = 0
    while len(prompts) < n:
        attempts += 1
        if attempts > 50 * n + 1000:
            raise RuntimeError(f"could not generate {n} distinct prompts for this caption")
        use_long = rng.random() < long_frac
        pool = tables["long_templates"] if use_long else tables["short_templates"]
        template = pool[rng.integers(len(pool))]
        starter = tables["starters"][rng.integers(len(tables["starters"]))]
        cue = cues[rng.integers(len(cues))]
        emotion = tables["emotional_contexts"][rng.integers(len(tables["emotional_contexts"]))]
        persona = tables["personas"][rng.integers(len(tables["personas"]))]
        style = None
        if use_long and rng.random() < 0.3:
            style = tables["styles"][rng.integers(len(tables["styles"]))]
        prompt = render_prompt(caption, template, starter, cue, emotion, persona, style)
        if prompt not in seen:
            seen.add(prompt)
            prompts.append(prompt)
    return prompts
