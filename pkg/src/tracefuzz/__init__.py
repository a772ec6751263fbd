"""Greybox fuzzing for LLM inference-serving engines.

Timed multi-request traces are the input format; a staged oracle pipeline
(behavioral checks, logprob-assisted relational confirmation, KV-stream
forensics) separates real serving-layer defects from benign decode variation.
"""

__version__ = "0.1.0"

from .trace import (  # noqa: F401
    EventKind,
    PromptShape,
    RequestSpec,
    SamplingConfig,
    TimedTrace,
    TraceEvent,
    deserialize,
    serialize,
    synthesize_prompt,
    validate,
    repair,
)
