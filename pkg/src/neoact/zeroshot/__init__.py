"""Zero-shot prompting protocols against pluggable inference backends."""

from .backends import (BackendEndpoint, HttpBackend, MockBackend, Request, Response, TransportError,
                       TransportTimeout, UnscriptedRequest, make_backend)
from .parsers import CoParse, ParseFailure, parse_co, parse_judge, parse_yes_no
from .protocols import (PROTOCOLS, ClipRef, PromptSpec, ProtocolResult, TranscriptWriter, caption_prompt,
                        decode, load_prompt_spec, read_transcript, rederive, run_corpus, run_protocol,
                        run_zs_b, run_zsc_co, run_zsc_j)
