from contextlib import contextmanager
import os
from typing import IO, Generator, Mapping, Optional, Union

from opentelemetry import trace
from opentelemetry.sdk.trace import ReadableSpan, TracerProvider
from opentelemetry.sdk.trace.export import ConsoleSpanExporter, SimpleSpanProcessor

Attribute = Union[str, bool, int, float]
Context = Optional[Mapping[str, Attribute]]


def single_line_json(span: ReadableSpan) -> str:
    """Format a span as one line of JSON, so a trace file holds one span per line."""
    json = span.to_json(indent=None)
    assert isinstance(json, str)
    return json + os.linesep


def init(tracefile: Optional[IO[str]] = None) -> None:
    provider = TracerProvider()
    if tracefile is not None:
        provider.add_span_processor(
            SimpleSpanProcessor(
                ConsoleSpanExporter(out=tracefile, formatter=single_line_json)
            )
        )
    trace.set_tracer_provider(provider)


def _attributes(context: Context) -> Optional[Mapping[str, Attribute]]:
    if context is None:
        return None
    # Span attributes reject None, so unset values are left out.
    return {key: value for key, value in context.items() if value is not None}


@contextmanager
def span(span_name: str, context: Context = None) -> Generator[None, None, None]:
    tracer = trace.get_tracer(__name__)

    with tracer.start_as_current_span(span_name, attributes=_attributes(context)):
        yield


def event(event_name: str, context: Context = None) -> None:
    """Record a point-in-time note on the current span."""
    trace.get_current_span().add_event(event_name, attributes=_attributes(context))
